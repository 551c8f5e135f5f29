"""Adversarial training loop, early stopping, and checkpointing.

Checkpoint directory format:

    weights.bin  concatenated little-endian float32 arrays
    index.json   ordered [{"name", "shape", "offset", "dtype"}] (offsets in bytes)
    meta.json    epoch, monitor value, config/arch hashes, model configs,
                 optimizer hyperparameters, RNG derivation record

All trainer randomness is derived from the config seed via stable
(seed, stream, epoch, step) keys, so runs replay exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .datapipe import Manifest, load_image
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    IncompatibilityError,
    NumericError,
)
from .metrics import psnr
from .networks import (
    Discriminator,
    DiscriminatorConfig,
    DropoutMode,
    Generator,
    GeneratorConfig,
    ParameterSet,
    build_discriminator,
    build_generator,
)
from .objectives import (
    FeatureExtractor,
    LossWeights,
    composite_generator_loss,
    ragan_discriminator_loss,
)
from .seeding import derive_seed
from .semantics import Segmenter

__all__ = [
    "TrainConfig",
    "TrainingBackends",
    "EarlyStopState",
    "early_stop_update",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "TrainingResult",
    "train",
    "finetune",
    "load_split_arrays",
]

# seed stream tags
_STREAM_SHUFFLE = 0
_STREAM_DROPOUT_D = 1
_STREAM_DROPOUT_G = 2
_STREAM_INIT_G = 3
_STREAM_INIT_D = 4


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and monitoring knobs."""

    max_epochs: int = 30
    patience: int = 10
    batch_size: int = 16
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-4
    finetune_lr: float = 1e-5
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    monitor: str = "val_psnr"

    def validate(self) -> None:
        # max_epochs == 0 is allowed so a fine-tune can be a pure reload
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr_generator", "lr_discriminator", "finetune_lr"):
            v = getattr(self, name)
            if not (v > 0.0):
                raise ConfigError(f"{name} must be > 0, got {v}")
        b1, b2 = self.adam_betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"adam_betas must lie in [0, 1), got {self.adam_betas}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.monitor != "val_psnr":
            raise ConfigError(f"unsupported monitor {self.monitor!r}")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["adam_betas"] = list(self.adam_betas)
        return out


@dataclass
class TrainingBackends:
    """Pluggable semantic and perceptual backends used by the loss."""

    segmenter: Segmenter
    features: FeatureExtractor


@dataclass(frozen=True)
class EarlyStopState:
    """Monitor bookkeeping; higher monitor values are better."""

    best_value: float = float("-inf")
    best_epoch: int = 0
    epochs_since_improvement: int = 0


def early_stop_update(
    state: EarlyStopState, value: float, epoch: int, patience: int
) -> tuple[EarlyStopState, bool]:
    """Fold one epoch's monitor value into the state.

    Only strict improvement resets the counter; training stops when the
    counter reaches ``patience``.
    """
    if patience < 1:
        raise ConfigError(f"patience must be >= 1, got {patience}")
    if value > state.best_value:
        new = EarlyStopState(best_value=value, best_epoch=epoch,
                             epochs_since_improvement=0)
        return new, False
    new = EarlyStopState(
        best_value=state.best_value,
        best_epoch=state.best_epoch,
        epochs_since_improvement=state.epochs_since_improvement + 1,
    )
    return new, new.epochs_since_improvement >= patience


# ---------------------------------------------------------------------------
# checkpoints


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def architecture_hash(gen_config: GeneratorConfig, disc_config: DiscriminatorConfig) -> str:
    payload = _canonical({
        "generator": gen_config.to_dict(),
        "discriminator": disc_config.to_dict(),
    })
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    """Complete training state for the best epoch seen so far."""

    generator_config: GeneratorConfig
    discriminator_config: DiscriminatorConfig
    generator_params: ParameterSet
    discriminator_params: ParameterSet  # parameters and BN buffers
    optimizer_g: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_d: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_g_meta: dict = field(default_factory=dict)
    optimizer_d_meta: dict = field(default_factory=dict)
    epoch: int = 0
    monitor_value: float | None = None
    config_hash: str = ""
    rng: dict = field(default_factory=dict)

    def arch_hash(self) -> str:
        return architecture_hash(self.generator_config, self.discriminator_config)

    def build_generator(self) -> Generator:
        gen = Generator(self.generator_config)
        self.generator_params.apply_to(gen)
        return gen

    def build_discriminator(self) -> Discriminator:
        disc = Discriminator(self.discriminator_config)
        self.discriminator_params.apply_to(disc)
        return disc


def _array_sections(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    for name, arr in ckpt.generator_params:
        out.append((f"generator/{name}", arr))
    for name, arr in ckpt.discriminator_params:
        out.append((f"discriminator/{name}", arr))
    for prefix, table in (("optim_g", ckpt.optimizer_g), ("optim_d", ckpt.optimizer_d)):
        for name, arr in table.items():
            out.append((f"{prefix}/{name}", arr))
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Write weights.bin / index.json / meta.json under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    offset = 0
    for name, arr in _array_sections(ckpt):
        arr = np.asarray(arr)
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "dtype": str(arr.dtype),
        })
        blobs.append(data)
        offset += len(data)
    (root / "weights.bin").write_bytes(b"".join(blobs))
    (root / "index.json").write_text(json.dumps(index, indent=1))
    meta = {
        "epoch": ckpt.epoch,
        "monitor_value": ckpt.monitor_value,
        "config_hash": ckpt.config_hash,
        "arch_hash": ckpt.arch_hash(),
        "model": {
            "generator": ckpt.generator_config.to_dict(),
            "discriminator": ckpt.discriminator_config.to_dict(),
        },
        "optimizer": {"g": ckpt.optimizer_g_meta, "d": ckpt.optimizer_d_meta},
        "rng": ckpt.rng,
        "format_version": 1,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Read a checkpoint directory back; structural problems raise."""
    root = Path(path)
    for fname in ("weights.bin", "index.json", "meta.json"):
        if not (root / fname).is_file():
            raise CheckpointError(f"checkpoint {root} is missing {fname}")
    try:
        index = json.loads((root / "index.json").read_text())
        meta = json.loads((root / "meta.json").read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {root} has corrupt JSON: {exc}") from exc
    payload = (root / "weights.bin").read_bytes()

    tables: dict[str, dict[str, np.ndarray]] = {
        "generator": {}, "discriminator": {}, "optim_g": {}, "optim_d": {},
    }
    expected_offset = 0
    for item in index:
        name, shape, offset = item["name"], tuple(item["shape"]), item["offset"]
        if offset != expected_offset:
            raise CheckpointError(
                f"index offset mismatch at {name!r}: {offset} != {expected_offset}"
            )
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise CheckpointError(f"weights.bin truncated at {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        arr = arr.astype(item.get("dtype", "float32"))
        section, _, key = name.partition("/")
        if section not in tables:
            raise CheckpointError(f"unknown checkpoint section {section!r}")
        tables[section][key] = arr
        expected_offset = offset + nbytes
    if expected_offset != len(payload):
        raise CheckpointError(
            f"weights.bin has {len(payload)} bytes, index covers {expected_offset}"
        )

    try:
        gen_config = GeneratorConfig(**meta["model"]["generator"])
        disc_config = DiscriminatorConfig(**meta["model"]["discriminator"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint meta lacks model configs: {exc}") from exc
    ckpt = Checkpoint(
        generator_config=gen_config,
        discriminator_config=disc_config,
        generator_params=ParameterSet(tables["generator"]),
        discriminator_params=ParameterSet(tables["discriminator"]),
        optimizer_g=tables["optim_g"],
        optimizer_d=tables["optim_d"],
        optimizer_g_meta=meta.get("optimizer", {}).get("g", {}),
        optimizer_d_meta=meta.get("optimizer", {}).get("d", {}),
        epoch=int(meta["epoch"]),
        monitor_value=meta["monitor_value"],
        config_hash=meta.get("config_hash", ""),
        rng=meta.get("rng", {}),
    )
    if meta.get("arch_hash") and meta["arch_hash"] != ckpt.arch_hash():
        raise CheckpointError("meta arch_hash does not match stored model configs")
    return ckpt


def _optimizer_arrays(opt: torch.optim.Adam, names: list[str]) -> tuple[dict[str, np.ndarray], dict]:
    sd = opt.state_dict()
    arrays: dict[str, np.ndarray] = {}
    for idx, name in enumerate(names):
        state = sd["state"].get(idx)
        if state is None:
            continue
        arrays[f"{name}/step"] = np.asarray(state["step"].detach().cpu().numpy(), dtype=np.float32)
        arrays[f"{name}/exp_avg"] = state["exp_avg"].detach().cpu().numpy().copy()
        arrays[f"{name}/exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy().copy()
    group = {k: v for k, v in sd["param_groups"][0].items() if k != "params"}
    meta = json.loads(json.dumps(group, default=lambda o: None))
    return arrays, meta


def _restore_optimizer(opt: torch.optim.Adam, names: list[str],
                       arrays: dict[str, np.ndarray], meta: dict) -> None:
    sd = opt.state_dict()
    group = dict(sd["param_groups"][0])
    for key, value in meta.items():
        if key in group and value is not None:
            group[key] = tuple(value) if key == "betas" else value
    state = {}
    for idx, name in enumerate(names):
        if f"{name}/exp_avg" not in arrays:
            continue
        state[idx] = {
            "step": torch.tensor(float(arrays[f"{name}/step"]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(np.ascontiguousarray(arrays[f"{name}/exp_avg"])),
            "exp_avg_sq": torch.from_numpy(np.ascontiguousarray(arrays[f"{name}/exp_avg_sq"])),
        }
    group["params"] = list(range(len(names)))
    opt.load_state_dict({"state": state, "param_groups": [group]})


# ---------------------------------------------------------------------------
# data access


def load_split_arrays(
    manifest: Manifest, base_dir: str | os.PathLike, split: str
) -> tuple[np.ndarray, np.ndarray]:
    """Load one split as stacked float32 arrays (lr (n,3,h,w), hr (n,3,H,W))."""
    entries = manifest.splits.get(split)
    if not entries:
        raise DataError(f"manifest has no entries for split {split!r}")
    base = Path(base_dir)
    lrs, hrs = [], []
    for e in entries:
        if not e.lr:
            raise DataError(
                f"manifest entry {e.hr!r} has no LR path; run dataset preparation first"
            )
        lrs.append(load_image(base / e.lr))
        hrs.append(load_image(base / e.hr))
    lr_shape = {a.shape for a in lrs}
    hr_shape = {a.shape for a in hrs}
    if len(lr_shape) != 1 or len(hr_shape) != 1:
        raise DataError(f"split {split!r} mixes image sizes: {lr_shape} / {hr_shape}")
    lr_stack = np.stack(lrs)
    hr_stack = np.stack(hrs)
    if (hr_stack.shape[-2] != 4 * lr_stack.shape[-2]
            or hr_stack.shape[-1] != 4 * lr_stack.shape[-1]):
        raise DataError(
            f"split {split!r} is not a x4 pairing: lr {lr_stack.shape} hr {hr_stack.shape}"
        )
    return lr_stack, hr_stack


@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    history: list[dict]
    best_epoch: int
    stopped_epoch: int


def _validation_psnr(gen: Generator, lr_stack: np.ndarray, hr_stack: np.ndarray,
                     batch_size: int) -> float:
    """Mean per-image PSNR of deterministic (dropout disabled) outputs."""
    vals = []
    with torch.no_grad():
        for start in range(0, lr_stack.shape[0], batch_size):
            lr_b = torch.from_numpy(lr_stack[start:start + batch_size])
            sr = gen(lr_b, DropoutMode.disabled()).clamp(0.0, 1.0).cpu().numpy()
            for i in range(sr.shape[0]):
                vals.append(psnr(sr[i], hr_stack[start + i]))
    return float(np.mean(vals))


def _snapshot(gen: Generator, disc: Discriminator, opt_g, opt_d,
              gen_names: list[str], disc_names: list[str],
              gen_config: GeneratorConfig, disc_config: DiscriminatorConfig,
              epoch: int, monitor_value: float | None, config_hash: str,
              seed: int) -> Checkpoint:
    og, og_meta = _optimizer_arrays(opt_g, gen_names)
    od, od_meta = _optimizer_arrays(opt_d, disc_names)
    return Checkpoint(
        generator_config=gen_config,
        discriminator_config=disc_config,
        generator_params=ParameterSet.from_module(gen),
        discriminator_params=ParameterSet.from_module(disc, include_buffers=True),
        optimizer_g=og,
        optimizer_d=od,
        optimizer_g_meta=og_meta,
        optimizer_d_meta=od_meta,
        epoch=epoch,
        monitor_value=monitor_value,
        config_hash=config_hash,
        rng={"scheme": "seed-derived", "base_seed": seed, "epochs_run": epoch},
    )


def _run_training(
    gen: Generator,
    disc: Discriminator,
    manifest: Manifest,
    base_dir: str | os.PathLike,
    loss_weights: LossWeights,
    train_config: TrainConfig,
    backends: TrainingBackends,
    lr_g: float,
    lr_d: float,
    config_hash: str,
) -> TrainingResult:
    train_config.validate()
    loss_weights.validate()
    lr_train, hr_train = load_split_arrays(manifest, base_dir, "train")
    lr_val, hr_val = load_split_arrays(manifest, base_dir, "val")
    hr_side = hr_train.shape[-1]
    if hr_side != disc.config.input_size or hr_train.shape[-2] != disc.config.input_size:
        raise ConfigError(
            f"discriminator input_size {disc.config.input_size} does not match "
            f"HR image size {hr_train.shape[-2:]}"
        )

    seed = train_config.seed
    betas = tuple(train_config.adam_betas)
    opt_g = torch.optim.Adam(gen.parameters(), lr=lr_g, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=lr_d, betas=betas)
    gen_names = [n for n, _ in gen.named_parameters()]
    disc_names = [n for n, _ in disc.named_parameters()]

    stop_state = EarlyStopState()
    history: list[dict] = []
    best: Checkpoint | None = None
    n = lr_train.shape[0]
    batch = train_config.batch_size

    gen.train()
    disc.train()
    epoch = 0
    for epoch in range(1, train_config.max_epochs + 1):
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, _STREAM_SHUFFLE, epoch])
        )
        order = rng.permutation(n)
        sums = {"d_loss": 0.0, "pixel": 0.0, "perceptual": 0.0,
                "adversarial": 0.0, "semantic": 0.0, "total": 0.0}
        steps = 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            lr_b = torch.from_numpy(lr_train[idx])
            hr_b = torch.from_numpy(hr_train[idx])
            step = steps

            # discriminator update on a detached generator sample
            for p in disc.parameters():
                p.requires_grad_(True)
            with torch.no_grad():
                sr_d = gen(lr_b, DropoutMode.stochastic(
                    derive_seed(seed, _STREAM_DROPOUT_D, epoch, step)))
            d_loss = ragan_discriminator_loss(disc(hr_b), disc(sr_d))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            # generator update; discriminator frozen but still in the graph
            for p in disc.parameters():
                p.requires_grad_(False)
            sr = gen(lr_b, DropoutMode.stochastic(
                derive_seed(seed, _STREAM_DROPOUT_G, epoch, step)))
            fake_logits = disc(sr)
            with torch.no_grad():
                real_logits = disc(hr_b)
                p_hr = backends.segmenter.probabilities(hr_b)
            p_sr = backends.segmenter.probabilities(sr)
            breakdown = composite_generator_loss(
                sr, hr_b, real_logits, fake_logits, p_sr, p_hr,
                loss_weights, backends.features,
            )
            opt_g.zero_grad()
            breakdown.total.backward()
            opt_g.step()

            d_val = float(d_loss.detach())
            comp = breakdown.detach_floats()
            if not (np.isfinite(d_val) and all(np.isfinite(v) for v in comp.values())):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step}"
                )
            sums["d_loss"] += d_val
            for key in ("pixel", "perceptual", "adversarial", "semantic", "total"):
                sums[key] += comp[key]
            steps += 1

        val_psnr = _validation_psnr(gen, lr_val, hr_val, batch)
        gen.train()
        stop_state, should_stop = early_stop_update(
            stop_state, val_psnr, epoch, train_config.patience
        )
        improved = stop_state.best_epoch == epoch
        record = {
            "epoch": epoch,
            "steps": steps,
            "d_loss": sums["d_loss"] / steps,
            "g_pixel": sums["pixel"] / steps,
            "g_perceptual": sums["perceptual"] / steps,
            "g_adversarial": sums["adversarial"] / steps,
            "g_semantic": sums["semantic"] / steps,
            "g_total": sums["total"] / steps,
            "val_psnr": val_psnr,
            "improved": improved,
        }
        history.append(record)
        if improved:
            best = _snapshot(
                gen, disc, opt_g, opt_d, gen_names, disc_names,
                gen.config, disc.config, epoch, val_psnr, config_hash, seed,
            )
        if should_stop:
            break

    if best is None:
        # zero-epoch run (or nothing improved over -inf, which cannot happen
        # once an epoch ran): snapshot the current state as-is
        best = _snapshot(
            gen, disc, opt_g, opt_d, gen_names, disc_names,
            gen.config, disc.config, epoch, None, config_hash, seed,
        )
    return TrainingResult(
        checkpoint=best,
        history=history,
        best_epoch=best.epoch,
        stopped_epoch=epoch,
    )


def train(
    manifest: Manifest,
    base_dir: str | os.PathLike,
    generator_config: GeneratorConfig,
    discriminator_config: DiscriminatorConfig,
    loss_weights: LossWeights,
    train_config: TrainConfig,
    backends: TrainingBackends,
    config_hash: str = "",
) -> TrainingResult:
    """Train from scratch; returns the best-epoch checkpoint and history.

    The monitor is validation PSNR with dropout disabled, higher is better.
    One discriminator step then one generator step per batch; dropout stays
    active in generator training passes.
    """
    train_config.validate()
    gen, _ = build_generator(generator_config,
                             derive_seed(train_config.seed, _STREAM_INIT_G))
    disc, _ = build_discriminator(discriminator_config,
                                  derive_seed(train_config.seed, _STREAM_INIT_D))
    return _run_training(
        gen, disc, manifest, base_dir, loss_weights, train_config, backends,
        lr_g=train_config.lr_generator, lr_d=train_config.lr_discriminator,
        config_hash=config_hash,
    )


def finetune(
    checkpoint: Checkpoint,
    manifest: Manifest,
    base_dir: str | os.PathLike,
    loss_weights: LossWeights,
    train_config: TrainConfig,
    backends: TrainingBackends,
    config_hash: str = "",
    generator_config: GeneratorConfig | None = None,
    discriminator_config: DiscriminatorConfig | None = None,
) -> TrainingResult:
    """Continue training from a checkpoint on a (possibly new) corpus.

    Both networks restart with fresh Adam optimizers at ``finetune_lr``.
    When the run specifies an architecture it must hash-match the
    checkpoint's; with zero epochs the result reproduces the checkpoint
    weights unchanged.
    """
    train_config.validate()
    if generator_config is not None or discriminator_config is not None:
        requested = architecture_hash(
            generator_config or checkpoint.generator_config,
            discriminator_config or checkpoint.discriminator_config,
        )
        if requested != checkpoint.arch_hash():
            raise IncompatibilityError(
                "requested architecture does not match the checkpoint "
                f"(config hash {requested[:12]} vs {checkpoint.arch_hash()[:12]})"
            )
    gen = checkpoint.build_generator()
    disc = checkpoint.build_discriminator()
    return _run_training(
        gen, disc, manifest, base_dir, loss_weights, train_config, backends,
        lr_g=train_config.finetune_lr, lr_d=train_config.finetune_lr,
        config_hash=config_hash,
    )
