"""Command line interface.

Subcommands: synth-data, prepare-data, train, finetune, infer, evaluate,
report. Exit codes: 0 on success, 1 on failure, 2 on usage errors. The
SUESR_SEED environment variable supplies the default seed wherever one is
not given explicitly (explicit config file values and flags win).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import datapipe
from .config import RunConfig
from .datapipe import Manifest, load_image, save_image
from .errors import ConfigError, SuesrError
from .metrics import evaluate_split
from .networks import DropoutMode
from .objectives import create_feature_extractor
from .panels import emit_panel
from .semantics import create_segmenter
from .trainer import (
    TrainingBackends,
    finetune,
    load_checkpoint,
    load_split_arrays,
    save_checkpoint,
    train,
)
from .uncertainty import mc_inference, render_heatmap

__all__ = ["main"]

ENV_SEED = "SUESR_SEED"


def _env_seed() -> int | None:
    raw = os.environ.get(ENV_SEED)
    if raw is None:
        return None
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{ENV_SEED} must be an integer, got {raw!r}") from exc
    if value < 0:
        raise ConfigError(f"{ENV_SEED} must be non-negative, got {value}")
    return value


def _pick_seed(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = _env_seed()
    return 0 if env is None else env


def _load_raw_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return obj


def _layered_config(config_path: str | None, flag_layers: dict) -> RunConfig:
    """defaults < SUESR_SEED < config file < flags."""
    rc = RunConfig({})
    env = _env_seed()
    if env is not None:
        rc.apply({"data": {"seed": env}, "train": {"seed": env},
                  "infer": {"seed": env}})
    raw = _load_raw_config(config_path)
    if raw:
        rc.apply(raw)
    if flag_layers:
        rc.apply(flag_layers)
    return rc


def _train_flag_layer(args) -> dict:
    train_over = {}
    for flag, key in (
        ("seed", "seed"),
        ("max_epochs", "max_epochs"),
        ("batch_size", "batch_size"),
        ("patience", "patience"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            train_over[key] = value
    return {"train": train_over} if train_over else {}


def _backends_from(rc: RunConfig) -> TrainingBackends:
    loss = rc.section("loss")
    return TrainingBackends(
        segmenter=create_segmenter(loss["segmenter_backend"]),
        features=create_feature_extractor(loss["feature_backend"]),
    )


# ---------------------------------------------------------------------------
# command handlers


def _cmd_synth_data(args) -> int:
    paths = datapipe.synthesize_toy_dataset(
        args.out, count=args.count, hr_size=args.hr_size,
        seed=_pick_seed(args.seed),
    )
    print(f"wrote {len(paths)} toy images under {args.out}")
    return 0


def _cmd_prepare_data(args) -> int:
    flag_layer: dict = {"data": {}}
    if args.seed is not None:
        flag_layer["data"]["seed"] = args.seed
    if args.hr_size is not None:
        flag_layer["data"]["hr_size"] = args.hr_size
    if args.factor is not None:
        flag_layer["data"]["scale_factor"] = args.factor
    if args.fractions is not None:
        flag_layer["data"]["fractions"] = args.fractions
    if args.no_verify:
        flag_layer["data"]["verify_images"] = False
    rc = _layered_config(args.config, flag_layer if flag_layer["data"] else {})
    data = rc.section("data")
    manifest = datapipe.build_manifest(
        args.root,
        fractions=tuple(data["fractions"]),
        seed=data["seed"],
        verify_images=data["verify_images"],
    )
    materialized = datapipe.prepare_dataset(
        manifest, args.out, hr_size=data["hr_size"], factor=data["scale_factor"],
    )
    counts = {name: len(entries) for name, entries in materialized.splits.items()}
    print(f"prepared {counts} -> {args.out} "
          f"({len(materialized.excluded)} excluded)")
    return 0


def _cmd_train(args) -> int:
    rc = _layered_config(args.config, _train_flag_layer(args))
    manifest = Manifest.load(Path(args.data) / "manifest.json")
    backends = _backends_from(rc)
    result = train(
        manifest, args.data,
        rc.generator_config(), rc.discriminator_config(),
        rc.loss_weights(), rc.train_config(), backends,
        config_hash=rc.hash(),
    )
    out = Path(args.out)
    save_checkpoint(result.checkpoint, out / "checkpoint")
    (out / "history.json").write_text(json.dumps(result.history, indent=2))
    rc.save(out / "config.json")
    monitor = result.checkpoint.monitor_value
    print(f"trained {result.stopped_epoch} epochs; best epoch "
          f"{result.best_epoch} (val_psnr "
          f"{monitor if monitor is None else round(monitor, 4)}); "
          f"checkpoint at {out / 'checkpoint'}")
    return 0


def _cmd_finetune(args) -> int:
    rc = _layered_config(args.config, _train_flag_layer(args))
    raw = _load_raw_config(args.config)
    manifest = Manifest.load(Path(args.data) / "manifest.json")
    ckpt = load_checkpoint(args.checkpoint)
    backends = _backends_from(rc)
    # only enforce the architecture when the config file pins one
    arch_args = {}
    if "model" in raw:
        arch_args = {
            "generator_config": rc.generator_config(),
            "discriminator_config": rc.discriminator_config(),
        }
    result = finetune(
        ckpt, manifest, args.data, rc.loss_weights(), rc.train_config(),
        backends, config_hash=rc.hash(), **arch_args,
    )
    out = Path(args.out)
    save_checkpoint(result.checkpoint, out / "checkpoint")
    (out / "history.json").write_text(json.dumps(result.history, indent=2))
    rc.save(out / "config.json")
    print(f"fine-tuned {result.stopped_epoch} epochs; best epoch "
          f"{result.best_epoch}; checkpoint at {out / 'checkpoint'}")
    return 0


def _sigma_sidecar(shape: tuple[int, ...]) -> dict:
    return {
        "shape": list(shape),
        "dtype": "float32",
        "byte_order": "little",
        "order": "C",
    }


def _cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    gen = ckpt.build_generator()
    gen.eval()
    lr = load_image(args.input)
    out = mc_inference(
        gen, torch.from_numpy(lr), passes=args.mc_passes,
        base_seed=_pick_seed(args.seed),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    mean = np.clip(out.mean, 0.0, 1.0).astype(np.float32)
    save_image(mean, out_dir / f"{stem}.mean.png")
    sigma = out.stddev.astype("<f4")
    (out_dir / f"{stem}.sigma.raw").write_bytes(np.ascontiguousarray(sigma).tobytes())
    (out_dir / f"{stem}.sigma.json").write_text(
        json.dumps(_sigma_sidecar(sigma.shape), indent=2)
    )
    heat = render_heatmap(out.stddev)
    from PIL import Image

    Image.fromarray(heat, mode="RGB").save(out_dir / f"{stem}.heatmap.png")
    print(f"wrote {stem}.mean.png, {stem}.sigma.raw, {stem}.heatmap.png "
          f"under {out_dir} ({args.mc_passes} passes)")
    return 0


def _split_outputs(gen, lr_stack: np.ndarray, mode: str, passes: int,
                   seed: int, batch: int = 8) -> list[np.ndarray]:
    outs: list[np.ndarray] = []
    if mode == "deterministic":
        with torch.no_grad():
            for start in range(0, lr_stack.shape[0], batch):
                sr = gen(torch.from_numpy(lr_stack[start:start + batch]),
                         DropoutMode.disabled())
                outs.extend(np.clip(sr.cpu().numpy(), 0.0, 1.0))
    elif mode == "mc-mean":
        for i in range(lr_stack.shape[0]):
            res = mc_inference(gen, torch.from_numpy(lr_stack[i]),
                               passes=passes, base_seed=seed + i)
            outs.append(np.clip(res.mean, 0.0, 1.0).astype(np.float32))
    else:
        raise ConfigError(f"unknown SR mode {mode!r}")
    return outs


def _cmd_evaluate(args) -> int:
    rc = _layered_config(args.config, {})
    metrics_cfg = rc.section("metrics")
    mode = args.mode or metrics_cfg["sr_mode"]
    passes = args.mc_passes or metrics_cfg["mc_passes"]
    features_spec = args.features or rc.section("loss")["feature_backend"]

    ckpt = load_checkpoint(args.checkpoint)
    gen = ckpt.build_generator()
    gen.eval()
    manifest = Manifest.load(Path(args.data) / "manifest.json")
    lr_stack, hr_stack = load_split_arrays(manifest, args.data, args.split)
    sr_images = _split_outputs(gen, lr_stack, mode, passes, _pick_seed(args.seed))
    extractor = create_feature_extractor(features_spec)
    report = evaluate_split(
        sr_images, list(hr_stack), extractor, split=args.split,
        config_hash=rc.hash(), sr_mode=mode,
    )
    report.save(args.out)
    if args.csv:
        report.write_csv(args.csv)
    fid_text = "null" if report.fid is None else f"{report.fid:.4f}"
    print(f"{args.split}: n={report.n_images} psnr={report.psnr_db:.4f} "
          f"ssim={report.ssim:.4f} lpips={report.lpips:.4f} fid={fid_text} "
          f"-> {args.out}")
    return 0


def _cmd_report(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    gen = ckpt.build_generator()
    gen.eval()
    manifest = Manifest.load(Path(args.data) / "manifest.json")
    entries = manifest.splits.get(args.split, [])
    if not (0 <= args.index < len(entries)):
        raise ConfigError(
            f"index {args.index} out of range for split {args.split!r} "
            f"({len(entries)} entries)"
        )
    entry = entries[args.index]
    lr = load_image(Path(args.data) / entry.lr)
    hr = load_image(Path(args.data) / entry.hr)
    with torch.no_grad():
        sr = gen(torch.from_numpy(lr), DropoutMode.disabled())
    sr = np.clip(sr.cpu().numpy(), 0.0, 1.0).astype(np.float32)
    heatmap = None
    if not args.no_heatmap:
        res = mc_inference(gen, torch.from_numpy(lr), passes=args.mc_passes,
                           base_seed=_pick_seed(args.seed))
        heatmap = render_heatmap(res.stddev)
    emit_panel(lr, sr, hr, args.out, heatmap=heatmap)
    print(f"wrote panel {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="suesr",
        description="Semantic- and uncertainty-aware x4 super-resolution",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a deterministic toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--hr-size", type=int, default=96)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("prepare-data",
                       help="split a class-per-directory corpus and write HR/LR pairs")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--hr-size", type=int, default=None)
    p.add_argument("--factor", type=int, default=None)
    p.add_argument("--fractions", type=float, nargs=3, default=None,
                   metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-verify", action="store_true",
                   help="skip image decodability probing")
    p.set_defaults(func=_cmd_prepare_data)

    for name, handler, is_finetune in (
        ("train", _cmd_train, False), ("finetune", _cmd_finetune, True),
    ):
        p = sub.add_parser(name, help=f"{name} on a prepared dataset")
        if is_finetune:
            p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True,
                       help="prepared dataset directory (holds manifest.json)")
        p.add_argument("--out", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--max-epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--patience", type=int, default=None)
        p.set_defaults(func=handler)

    p = sub.add_parser("infer", help="super-resolve one image with MC dropout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mc-passes", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("evaluate", help="metric report over a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=list(datapipe.SPLITS))
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--mode", default=None, choices=["deterministic", "mc-mean"])
    p.add_argument("--mc-passes", type=int, default=None)
    p.add_argument("--features", default=None,
                   help='feature backend, e.g. "random-conv:0" or "vgg19:<path>"')
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="LR|SR|HR|heatmap comparison figure")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=list(datapipe.SPLITS))
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mc-passes", type=int, default=20)
    p.add_argument("--no-heatmap", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SuesrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
