"""Data pipeline: bicubic degradation, stratified manifests, toy image synth.

Layout under a prepared output directory:

    <out>/manifest.json
    <out>/{train,val,test}/hr/<class>__<stem>.png
    <out>/{train,val,test}/lr/<class>__<stem>.png

LR images are computed from the already-quantized stored HR, so re-running
the downsampler on a stored HR byte-reproduces the stored LR.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError, InputError, ShapeError, SizeError

__all__ = [
    "SPLITS",
    "IMAGE_EXTENSIONS",
    "ManifestEntry",
    "Manifest",
    "load_image",
    "save_image",
    "bicubic_resize",
    "bicubic_downsample",
    "stratified_counts",
    "build_manifest",
    "prepare_dataset",
    "synthesize_toy_dataset",
]

SPLITS = ("train", "val", "test")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

_BICUBIC_A = -0.5


# ---------------------------------------------------------------------------
# image io


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load an image as float32 (3,H,W) scaled to [0,1]."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _quantize(img: np.ndarray) -> np.ndarray:
    """float (3,H,W) in [0,1] -> uint8 (H,W,3)."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _png_bytes(img_uint8_hwc: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(img_uint8_hwc, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Quantize a float (3,H,W) image to 8-bit and write a PNG atomically."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected (3,H,W) image, got {img.shape}")
    _atomic_write_bytes(Path(path), _png_bytes(_quantize(img)))


# ---------------------------------------------------------------------------
# bicubic resampling


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    """Keys cubic kernel with a = -0.5."""
    a = _BICUBIC_A
    at = np.abs(t)
    at2 = at * at
    at3 = at2 * at
    near = (a + 2.0) * at3 - (a + 3.0) * at2 + 1.0
    far = a * at3 - 5.0 * a * at2 + 8.0 * a * at - 4.0 * a
    return np.where(at <= 1.0, near, np.where(at < 2.0, far, 0.0))


def _axis_weights(in_n: int, out_n: int) -> np.ndarray:
    """Dense (out_n, in_n) row-stochastic resampling matrix for one axis.

    Downscaling widens the kernel support by the scale factor (anti-alias);
    out-of-range taps clamp to the edge sample; rows renormalize to sum 1.
    """
    scale = in_n / out_n
    support = max(scale, 1.0)
    mat = np.zeros((out_n, in_n), dtype=np.float64)
    radius = int(np.ceil(2.0 * support))
    for i in range(out_n):
        center = (i + 0.5) * scale - 0.5
        lo = int(np.floor(center)) - radius + 1
        taps = np.arange(lo, lo + 2 * radius)
        w = _cubic_kernel((taps - center) / support)
        keep = w != 0.0
        taps, w = taps[keep], w[keep]
        w = w / w.sum()
        np.add.at(mat[i], np.clip(taps, 0, in_n - 1), w)
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resize of a (C,H,W) float image, anti-aliased on
    downscale, edges handled by clamping. Output is clipped to [0,1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"expected (C,H,W) image, got {img.shape}")
    if out_h < 1 or out_w < 1:
        raise SizeError(f"output size must be positive, got ({out_h}, {out_w})")
    _, h, w = img.shape
    out = img
    if out_h != h:
        out = np.einsum("oh,chw->cow", _axis_weights(h, out_h), out)
    if out_w != w:
        out = np.einsum("ow,chw->cho", _axis_weights(w, out_w), out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def bicubic_downsample(hr: np.ndarray, factor: int = 4) -> np.ndarray:
    """Bicubic x(1/factor) degradation of a (C,H,W) image in [0,1]."""
    hr = np.asarray(hr)
    if hr.ndim != 3:
        raise ShapeError(f"expected (C,H,W) image, got {hr.shape}")
    if factor < 1:
        raise InputError(f"factor must be >= 1, got {factor}")
    _, h, w = hr.shape
    if h % factor != 0 or w % factor != 0:
        raise SizeError(f"spatial size ({h}, {w}) not divisible by factor {factor}")
    return bicubic_resize(hr, h // factor, w // factor)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    hr: str
    lr: str
    class_label: str

    def to_json(self) -> dict:
        return {"hr": self.hr, "lr": self.lr, "class": self.class_label}

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestEntry":
        try:
            return cls(hr=obj["hr"], lr=obj["lr"], class_label=obj["class"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed manifest entry: {obj!r}") from exc


@dataclass
class Manifest:
    """Split assignment of a corpus, plus what was excluded and why."""

    seed: int
    fractions: tuple[float, float, float]
    splits: dict[str, list[ManifestEntry]]
    excluded: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "fractions": list(self.fractions),
            "splits": {
                name: [e.to_json() for e in entries]
                for name, entries in self.splits.items()
            },
            "excluded": self.excluded,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Manifest":
        required = {"seed", "fractions", "splits", "excluded"}
        if not isinstance(obj, dict) or set(obj) != required:
            raise DataError(
                f"manifest must have exactly the fields {sorted(required)}"
            )
        fractions = tuple(float(f) for f in obj["fractions"])
        if len(fractions) != 3:
            raise DataError("manifest fractions must have three values")
        splits = {
            name: [ManifestEntry.from_json(e) for e in entries]
            for name, entries in obj["splits"].items()
        }
        if set(splits) != set(SPLITS):
            raise DataError(f"manifest splits must be exactly {SPLITS}")
        return cls(seed=int(obj["seed"]), fractions=fractions, splits=splits,
                   excluded=list(obj["excluded"]))

    def save(self, path: str | os.PathLike) -> None:
        payload = json.dumps(self.to_json(), indent=2, sort_keys=True)
        _atomic_write_bytes(Path(path), payload.encode("utf-8"))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Manifest":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_json(obj)

    def validate(self) -> None:
        seen: set[str] = set()
        for name, entries in self.splits.items():
            for e in entries:
                if e.hr in seen:
                    raise DataError(f"hr path {e.hr!r} appears in multiple splits")
                seen.add(e.hr)
        total = sum(self.fractions)
        if abs(total - 1.0) > 1e-9:
            raise DataError(f"fractions must sum to 1, got {total}")


def stratified_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Largest-remainder split of ``n`` items into three integer counts."""
    if n < 0:
        raise InputError(f"n must be >= 0, got {n}")
    exact = [n * f for f in fractions]
    counts = [int(np.floor(v)) for v in exact]
    remainder = n - sum(counts)
    # hand leftover items to the largest fractional parts; ties go to the
    # earlier split so the result is deterministic
    order = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in range(remainder):
        counts[order[i]] += 1
    return counts[0], counts[1], counts[2]


def _check_fractions(fractions) -> tuple[float, float, float]:
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3:
        raise ConfigError(f"need exactly three fractions, got {len(fr)}")
    if any(f <= 0.0 for f in fr):
        raise ConfigError(f"fractions must be positive, got {fr}")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fr)}")
    return fr


def _probe_image(path: Path) -> str | None:
    """Return an error string when the file is not a decodable image."""
    try:
        with Image.open(path) as im:
            im.verify()
        return None
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        return str(exc) or exc.__class__.__name__


def build_manifest(
    root: str | os.PathLike,
    fractions: tuple[float, float, float] = (0.64, 0.16, 0.20),
    seed: int = 0,
    verify_images: bool = True,
) -> Manifest:
    """Scan ``root`` (one subdirectory per class) into a stratified manifest.

    Per class: deterministic shuffle by (seed, class index), then a
    largest-remainder train/val/test allocation, so each class's share of a
    split deviates from the exact fraction by less than one item. Unreadable
    images are skipped and recorded under ``excluded`` when
    ``verify_images`` is set.
    """
    fractions = _check_fractions(fractions)
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"dataset root {root} contains no class directories")

    splits: dict[str, list[ManifestEntry]] = {name: [] for name in SPLITS}
    excluded: list[dict] = []
    for class_index, class_name in enumerate(classes):
        class_dir = root / class_name
        files = sorted(
            p for p in class_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        kept: list[Path] = []
        for p in files:
            if verify_images:
                err = _probe_image(p)
                if err is not None:
                    excluded.append({"path": str(p), "reason": err})
                    continue
            kept.append(p)
        if not kept:
            raise DataError(f"class directory {class_dir} has no usable images")
        rng = np.random.default_rng(np.random.SeedSequence([seed, class_index]))
        order = rng.permutation(len(kept))
        shuffled = [kept[i] for i in order]
        n_train, n_val, n_test = stratified_counts(len(shuffled), fractions)
        cursor = 0
        for split_name, count in zip(SPLITS, (n_train, n_val, n_test)):
            for p in shuffled[cursor:cursor + count]:
                splits[split_name].append(
                    ManifestEntry(hr=str(p), lr="", class_label=class_name)
                )
            cursor += count

    manifest = Manifest(seed=seed, fractions=fractions, splits=splits,
                        excluded=excluded)
    manifest.validate()
    return manifest


def _write_if_changed(path: Path, payload: bytes) -> bool:
    """Atomic write skipped when the file already holds the same bytes."""
    if path.is_file():
        if hashlib.sha256(path.read_bytes()).digest() == hashlib.sha256(payload).digest():
            return False
    _atomic_write_bytes(path, payload)
    return True


def _center_crop_square(img: np.ndarray) -> np.ndarray:
    _, h, w = img.shape
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return img[:, top:top + side, left:left + side]


def prepare_dataset(
    manifest: Manifest,
    out_dir: str | os.PathLike,
    hr_size: int = 256,
    factor: int = 4,
) -> Manifest:
    """Materialize HR/LR image pairs for every manifest entry.

    Each source image is center-cropped square, bicubic-resized to
    ``hr_size``, quantized to 8 bits, and degraded to LR by bicubic
    downsampling of the stored (quantized) HR. Writing is idempotent:
    existing byte-identical files are left untouched. Sources smaller than
    ``hr_size`` on either side are excluded with a recorded reason. Returns
    the materialized manifest, which is also written to
    ``<out_dir>/manifest.json`` with paths relative to ``out_dir``.
    """
    if hr_size < 32:
        raise ConfigError(f"hr_size must be >= 32, got {hr_size}")
    if factor < 1 or hr_size % factor != 0:
        raise ConfigError(f"factor must divide hr_size, got {factor} vs {hr_size}")
    out_root = Path(out_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    new_splits: dict[str, list[ManifestEntry]] = {name: [] for name in SPLITS}
    excluded = list(manifest.excluded)
    for split_name in SPLITS:
        for entry in manifest.splits.get(split_name, []):
            src = Path(entry.hr)
            try:
                img = load_image(src)
            except DataError as exc:
                excluded.append({"path": str(src), "reason": str(exc)})
                continue
            _, h, w = img.shape
            if min(h, w) < hr_size:
                excluded.append({
                    "path": str(src),
                    "reason": f"source {w}x{h} smaller than hr_size {hr_size}",
                })
                continue
            hr = _center_crop_square(img)
            if hr.shape[1] != hr_size:
                hr = bicubic_resize(hr, hr_size, hr_size)
            hr_q = _quantize(hr)
            # degrade from the quantized HR so stored pairs stay consistent
            hr_stored = np.ascontiguousarray(
                hr_q.transpose(2, 0, 1).astype(np.float32) / 255.0
            )
            lr = bicubic_downsample(hr_stored, factor)
            stem = f"{entry.class_label}__{src.stem}.png"
            hr_rel = f"{split_name}/hr/{stem}"
            lr_rel = f"{split_name}/lr/{stem}"
            _write_if_changed(out_root / hr_rel, _png_bytes(hr_q))
            _write_if_changed(out_root / lr_rel, _png_bytes(_quantize(lr)))
            new_splits[split_name].append(
                ManifestEntry(hr=hr_rel, lr=lr_rel, class_label=entry.class_label)
            )

    materialized = Manifest(seed=manifest.seed, fractions=manifest.fractions,
                            splits=new_splits, excluded=excluded)
    materialized.validate()
    materialized.save(out_root / "manifest.json")
    return materialized


# ---------------------------------------------------------------------------
# toy data


TOY_CLASSES = ("blocks", "discs")

# Fixed high-contrast palette (RGB cube corners pulled slightly inward) so
# the mapping from degraded colors back to exact fill values is learnable
# rather than a continuum.
_TOY_PALETTE = np.array(
    [
        [0.94, 0.06, 0.06],
        [0.06, 0.94, 0.06],
        [0.06, 0.06, 0.94],
        [0.94, 0.94, 0.06],
        [0.94, 0.06, 0.94],
        [0.06, 0.94, 0.94],
        [0.94, 0.94, 0.94],
        [0.06, 0.06, 0.06],
    ],
    dtype=np.float64,
)


def _toy_background(rng: np.random.Generator, size: int) -> np.ndarray:
    color = _TOY_PALETTE[int(rng.integers(len(_TOY_PALETTE)))]
    return np.tile(color[:, None, None], (1, size, size))


def _toy_image(rng: np.random.Generator, size: int, class_name: str) -> np.ndarray:
    img = _toy_background(rng, size)
    yy, xx = np.mgrid[0:size, 0:size]
    # Many small hard-edged shapes; edge-dense content is what separates a
    # learned upsampler from plain interpolation.
    lo = max(size // 16, 3)
    hi = max(size // 4, lo + 2)
    for _ in range(int(rng.integers(12, 19))):
        color = _TOY_PALETTE[int(rng.integers(len(_TOY_PALETTE)))]
        if class_name == "blocks":
            bw = int(rng.integers(lo, hi))
            bh = int(rng.integers(lo, hi))
            x0 = int(rng.integers(0, size - bw + 1))
            y0 = int(rng.integers(0, size - bh + 1))
            mask = (yy >= y0) & (yy < y0 + bh) & (xx >= x0) & (xx < x0 + bw)
        else:
            radius = int(rng.integers(max(lo // 2, 2), max(hi // 2, 3)))
            cx = int(rng.integers(radius, size - radius + 1))
            cy = int(rng.integers(radius, size - radius + 1))
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
        img[:, mask] = color[:, None]
    return np.clip(img, 0.0, 1.0)


def synthesize_toy_dataset(
    out_dir: str | os.PathLike,
    count: int = 256,
    hr_size: int = 96,
    seed: int = 0,
) -> list[Path]:
    """Write ``count`` deterministic toy images under per-class directories.

    Two classes (solid rectangles vs solid discs, drawn from a fixed palette
    on a flat palette background), assigned round-robin by index; image i
    depends only on (seed, i, hr_size, class). Returns the written paths.
    """
    if count < len(TOY_CLASSES):
        raise ConfigError(f"count must be >= {len(TOY_CLASSES)}, got {count}")
    if hr_size < 16:
        raise ConfigError(f"hr_size must be >= 16, got {hr_size}")
    out_root = Path(out_dir)
    paths: list[Path] = []
    for i in range(count):
        class_name = TOY_CLASSES[i % len(TOY_CLASSES)]
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        img = _toy_image(rng, hr_size, class_name)
        path = out_root / class_name / f"toy_{i:05d}.png"
        _write_if_changed(path, _png_bytes(_quantize(img)))
        paths.append(path)
    return paths
