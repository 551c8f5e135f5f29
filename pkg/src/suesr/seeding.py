"""Deterministic seed derivation shared by training and inference."""

from __future__ import annotations

import numpy as np

from .errors import InputError


def derive_seed(base_seed: int, *keys: int) -> int:
    """Derive an independent child seed from ``base_seed`` and integer keys.

    Uses ``numpy.random.SeedSequence`` so distinct key tuples give
    statistically independent streams and the mapping is stable across
    platforms and runs.
    """
    if base_seed < 0:
        raise InputError(f"base_seed must be non-negative, got {base_seed}")
    if any(k < 0 for k in keys):
        raise InputError(f"seed keys must be non-negative, got {keys}")
    ss = np.random.SeedSequence([base_seed, *keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
