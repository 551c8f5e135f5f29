"""Image quality metrics and distribution distance.

PSNR uses a +inf sentinel for identical inputs (serialized as the string
"inf"); SSIM follows the classic Gaussian-window formulation restricted to
valid (fully supported) windows; FID takes the symmetric-eigendecomposition
route for the matrix square root.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import convolve1d

from .errors import InputError, NumericError, ShapeError, SizeError
from .objectives import FeatureExtractor

__all__ = [
    "psnr",
    "ssim",
    "lpips_distance",
    "GaussianFit",
    "gaussian_fit",
    "fid",
    "MetricReport",
    "evaluate_split",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InputError("metric inputs must be finite")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    if peak <= 0:
        raise InputError(f"peak must be > 0, got {peak}")
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(n: int, sigma: float) -> np.ndarray:
    half = (n - 1) / 2.0
    x = np.arange(n, dtype=np.float64) - half
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _ssim_filter(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    # separable filter then crop to windows fully inside the image
    out = convolve1d(img, window, axis=0, mode="reflect")
    out = convolve1d(out, window, axis=1, mode="reflect")
    border = (len(window) - 1) // 2
    return out[border:-border, border:-border]


def _ssim_channel(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a = _ssim_filter(a, window)
    mu_b = _ssim_filter(b, window)
    var_a = _ssim_filter(a * a, window) - mu_a * mu_a
    var_b = _ssim_filter(b * b, window) - mu_b * mu_b
    cov = _ssim_filter(a * b, window) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows.

    Accepts (H,W) or (C,H,W); channels are averaged. Spatial size must be at
    least the window size.
    """
    if peak <= 0:
        raise InputError(f"peak must be > 0, got {peak}")
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    elif a.ndim != 3:
        raise ShapeError(f"expected (H,W) or (C,H,W), got {a.shape}")
    _, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise SizeError(
            f"image ({h}, {w}) smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    vals = [_ssim_channel(a[c], b[c], peak) for c in range(a.shape[0])]
    return float(np.mean(vals))


def lpips_distance(a: np.ndarray, b: np.ndarray, extractor: FeatureExtractor) -> float:
    """Learned-perceptual-style distance over extractor stages.

    Per stage: unit-normalize features along the channel axis
    (f / sqrt(sum_c f^2 + 1e-10)), take the squared difference, average over
    channels and positions. Stage values are summed. Zero iff the feature
    stacks agree; symmetric by construction.
    """
    a, b = _check_pair(a, b)
    if a.ndim != 3:
        raise ShapeError(f"expected (C,H,W) images, got {a.shape}")
    ta = torch.from_numpy(np.ascontiguousarray(a)).float()
    tb = torch.from_numpy(np.ascontiguousarray(b)).float()
    total = 0.0
    with torch.no_grad():
        for fa, fb in zip(extractor.stages(ta), extractor.stages(tb)):
            na = fa / torch.sqrt((fa * fa).sum(dim=0, keepdim=True) + 1e-10)
            nb = fb / torch.sqrt((fb * fb).sum(dim=0, keepdim=True) + 1e-10)
            total += float(((na - nb) ** 2).mean())
    return total


@dataclass
class GaussianFit:
    """Sample mean and (n-1 normalized) covariance of a feature cloud."""

    mean: np.ndarray
    cov: np.ndarray
    count: int


def gaussian_fit(features: np.ndarray) -> GaussianFit:
    """Fit mean/covariance to an (n, d) array of feature vectors (n >= 2)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected (n, d) features, got {x.shape}")
    n, d = x.shape
    if n < 2:
        raise InputError(f"need at least 2 feature vectors, got {n}")
    if not np.all(np.isfinite(x)):
        raise InputError("features must be finite")
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, ddof=1).reshape(d, d)
    return GaussianFit(mean=mean, cov=cov, count=n)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(fit_a: GaussianFit, fit_b: GaussianFit, eps: float = 1e-6) -> float:
    """Frechet distance between two Gaussian fits.

    ||mu_a - mu_b||^2 + tr(C_a + C_b - 2 (C_a C_b)^(1/2)), with the cross
    term computed as sqrt(C_a)^T C_b sqrt(C_a) via symmetric
    eigendecomposition. Ill-conditioned covariances are retried with eps on
    the diagonal; identical fits return exactly 0.
    """
    mu_a, cov_a = np.asarray(fit_a.mean, dtype=np.float64), np.asarray(fit_a.cov, dtype=np.float64)
    mu_b, cov_b = np.asarray(fit_b.mean, dtype=np.float64), np.asarray(fit_b.cov, dtype=np.float64)
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise ShapeError("gaussian fits have different dimensionality")
    if np.array_equal(mu_a, mu_b) and np.array_equal(cov_a, cov_b):
        return 0.0

    def cross_trace(ca: np.ndarray, cb: np.ndarray) -> float:
        root = _psd_sqrt(ca)
        inner = root @ cb @ root
        vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
        scale = max(1.0, float(np.abs(vals).max()))
        if vals.min() < -1e-8 * scale:
            raise NumericError("covariance product is not positive semi-definite")
        return float(np.sqrt(np.clip(vals, 0.0, None)).sum())

    diff = float(((mu_a - mu_b) ** 2).sum())
    try:
        tcross = cross_trace(cov_a, cov_b)
    except NumericError:
        eye = np.eye(cov_a.shape[0])
        tcross = cross_trace(cov_a + eps * eye, cov_b + eps * eye)
    value = diff + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * tcross
    return max(value, 0.0)


@dataclass
class MetricReport:
    """Aggregate metrics for one evaluated split."""

    split: str
    n_images: int
    psnr_db: float
    ssim: float
    lpips: float
    fid: float | None
    backends: dict[str, str]
    config_hash: str = ""
    per_image: list[dict] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "n_images": self.n_images,
            "psnr_db": "inf" if math.isinf(self.psnr_db) else self.psnr_db,
            "ssim": self.ssim,
            "lpips": self.lpips,
            "fid": self.fid,
            "backends": dict(self.backends),
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        psnr_v = obj["psnr_db"]
        return cls(
            split=obj["split"],
            n_images=int(obj["n_images"]),
            psnr_db=math.inf if psnr_v == "inf" else float(psnr_v),
            ssim=float(obj["ssim"]),
            lpips=float(obj["lpips"]),
            fid=None if obj["fid"] is None else float(obj["fid"]),
            backends=dict(obj["backends"]),
            config_hash=obj.get("config_hash", ""),
        )

    def save(self, path: str | os.PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    def write_csv(self, path: str | os.PathLike) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["index", "psnr_db", "ssim", "lpips"])
            writer.writeheader()
            for row in self.per_image:
                writer.writerow(row)


def _pooled_feature(img: np.ndarray, extractor: FeatureExtractor) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(np.asarray(img, dtype=np.float32)))
    with torch.no_grad():
        feat = extractor.features(t)
    return feat.mean(dim=(-2, -1)).reshape(-1).cpu().numpy().astype(np.float64)


def evaluate_split(
    sr_images: list[np.ndarray],
    hr_images: list[np.ndarray],
    extractor: FeatureExtractor,
    split: str = "test",
    config_hash: str = "",
    sr_mode: str = "deterministic",
) -> MetricReport:
    """Mean PSNR/SSIM/LPIPS over pairs plus FID between pooled feature clouds.

    FID needs at least two images per side; with fewer it is reported as
    None (serialized null).
    """
    if len(sr_images) != len(hr_images):
        raise ShapeError(
            f"got {len(sr_images)} outputs vs {len(hr_images)} references"
        )
    if not sr_images:
        raise InputError("cannot evaluate an empty split")
    rows = []
    for i, (sr, hr) in enumerate(zip(sr_images, hr_images)):
        rows.append({
            "index": i,
            "psnr_db": psnr(sr, hr),
            "ssim": ssim(sr, hr),
            "lpips": lpips_distance(sr, hr, extractor),
        })
    fid_value: float | None = None
    if len(sr_images) >= 2:
        feats_sr = np.stack([_pooled_feature(im, extractor) for im in sr_images])
        feats_hr = np.stack([_pooled_feature(im, extractor) for im in hr_images])
        fid_value = fid(gaussian_fit(feats_sr), gaussian_fit(feats_hr))
    return MetricReport(
        split=split,
        n_images=len(sr_images),
        psnr_db=float(np.mean([r["psnr_db"] for r in rows])),
        ssim=float(np.mean([r["ssim"] for r in rows])),
        lpips=float(np.mean([r["lpips"] for r in rows])),
        fid=fid_value,
        backends={"features": extractor.name, "sr_mode": sr_mode},
        config_hash=config_hash,
        per_image=rows,
    )
