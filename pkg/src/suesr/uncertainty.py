"""Monte-Carlo dropout inference: per-pixel mean, stddev, heatmap rendering.

Aggregation is done in float64 on per-element sorted values, which makes the
result exactly invariant to the order of the passes; bit-identical passes
short-circuit to a stddev of exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InputError, NumericError, ShapeError
from .networks import DropoutMode, Generator
from .seeding import derive_seed

__all__ = [
    "UncertaintyOutput",
    "aggregate_passes",
    "mc_inference",
    "heatmap_colormap",
    "render_heatmap",
]

DEFAULT_MC_PASSES = 20


@dataclass
class UncertaintyOutput:
    """Result of a Monte-Carlo inference run.

    ``mean``/``stddev`` are float64 arrays shaped like a single pass output;
    ``per_pass`` holds the individual pass outputs when retention was
    requested (aggregating them reproduces mean/stddev exactly).
    """

    mean: np.ndarray
    stddev: np.ndarray
    passes: int
    base_seed: int
    per_pass: list[np.ndarray] | None = None


def aggregate_passes(passes: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-element mean and population stddev over a list of equal-shape arrays.

    Properties the implementation guarantees exactly (not just to tolerance):
    the result does not depend on the order of ``passes``, and bit-identical
    passes yield stddev identically zero.
    """
    if len(passes) == 0:
        raise InputError("need at least one pass to aggregate")
    shape = np.asarray(passes[0]).shape
    for i, p in enumerate(passes):
        if np.asarray(p).shape != shape:
            raise ShapeError(
                f"pass {i} has shape {np.asarray(p).shape}, expected {shape}"
            )
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in passes], axis=0)
    first = stack[0]
    if all(np.array_equal(stack[t], first) for t in range(1, stack.shape[0])):
        return first.copy(), np.zeros_like(first)
    t_count = stack.shape[0]
    # sorting along the pass axis fixes the summation order per element
    ordered = np.sort(stack, axis=0)
    mean = ordered.sum(axis=0) / t_count
    dev_sq = np.sort((stack - mean) ** 2, axis=0)
    var = dev_sq.sum(axis=0) / t_count
    return mean, np.sqrt(var)


def mc_inference(
    gen: Generator,
    lr_image: torch.Tensor,
    passes: int = DEFAULT_MC_PASSES,
    base_seed: int = 0,
    retain_passes: bool = False,
) -> UncertaintyOutput:
    """Run ``passes`` stochastic forwards and aggregate them.

    Pass t uses an RNG seed derived from (base_seed, t), so results are
    reproducible and individual passes are independently re-runnable. With a
    zero dropout rate every pass is identical and the stddev is exactly zero.
    """
    if passes < 1:
        raise InputError(f"passes must be >= 1, got {passes}")
    if base_seed < 0:
        raise InputError(f"base_seed must be non-negative, got {base_seed}")
    outs: list[np.ndarray] = []
    with torch.no_grad():
        for t in range(passes):
            mode = DropoutMode.stochastic(derive_seed(base_seed, t))
            out = gen(lr_image, mode).cpu().numpy()
            if not np.all(np.isfinite(out)):
                raise NumericError(f"pass {t} produced non-finite values")
            outs.append(out)
    mean, std = aggregate_passes(outs)
    return UncertaintyOutput(
        mean=mean,
        stddev=std,
        passes=passes,
        base_seed=base_seed,
        per_pass=outs if retain_passes else None,
    )


def heatmap_colormap() -> np.ndarray:
    """256x3 uint8 dark-to-bright table (black -> red -> yellow -> white).

    Relative luminance (0.2126 R + 0.7152 G + 0.0722 B) increases
    monotonically along the table, so brighter always means more uncertain.
    """
    x = np.linspace(0.0, 1.0, 256)
    r = np.clip(3.0 * x, 0.0, 1.0)
    g = np.clip(3.0 * x - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * x - 2.0, 0.0, 1.0)
    table = np.stack([r, g, b], axis=1)
    return np.round(table * 255.0).astype(np.uint8)


def render_heatmap(stddev: np.ndarray) -> np.ndarray:
    """Render a stddev grid as an (H,W,3) uint8 heatmap.

    Channel dimension (if present) is averaged, then the grid is min-max
    normalized per image; an all-zero grid maps to the darkest table entry.
    """
    std = np.asarray(stddev, dtype=np.float64)
    if std.ndim == 3:
        std = std.mean(axis=0)
    elif std.ndim != 2:
        raise ShapeError(f"expected (C,H,W) or (H,W) stddev, got {std.shape}")
    if not np.all(np.isfinite(std)):
        raise InputError("stddev contains non-finite values")
    if np.any(std < 0.0):
        raise InputError("stddev must be non-negative")
    lo = std.min()
    hi = std.max()
    if hi > lo:
        norm = (std - lo) / (hi - lo)
    else:
        norm = np.zeros_like(std)
    idx = np.round(norm * 255.0).astype(np.int64)
    return heatmap_colormap()[idx]
