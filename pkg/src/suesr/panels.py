"""Side-by-side comparison figure: LR | SR | HR [| heatmap].

Panes share the HR display height; the LR pane is upscaled nearest-neighbor
so its pixels stay visibly blocky. A caption strip below reports PSNR/SSIM
of the SR pane against the HR pane.
"""

from __future__ import annotations

import math
import os

import numpy as np
from PIL import Image, ImageDraw

from .errors import InputError, ShapeError
from .metrics import psnr, ssim

__all__ = ["emit_panel", "render_panel"]

_GUTTER = 4
_CAPTION_HEIGHT = 24


def _to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected (3,H,W) image, got {img.shape}")
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def _nearest_upscale(img_hwc: np.ndarray, target_h: int) -> np.ndarray:
    h = img_hwc.shape[0]
    if h == target_h:
        return img_hwc
    if target_h % h != 0:
        # non-integer ratio: index-map nearest lookup
        rows = (np.arange(target_h) * h) // target_h
        cols = (np.arange(round(img_hwc.shape[1] * target_h / h)) * h) // target_h
        return img_hwc[rows][:, cols]
    k = target_h // h
    return np.repeat(np.repeat(img_hwc, k, axis=0), k, axis=1)


def render_panel(
    lr: np.ndarray,
    sr: np.ndarray,
    hr: np.ndarray,
    heatmap: np.ndarray | None = None,
) -> np.ndarray:
    """Compose the panes into one (H,W,3) uint8 image with caption strip."""
    if lr is None or sr is None or hr is None:
        raise InputError("lr, sr and hr panes are all mandatory")
    psnr_value = psnr(sr, hr)
    ssim_value = ssim(sr, hr)

    target_h = _to_uint8(hr).shape[0]
    panes = [
        _nearest_upscale(_to_uint8(lr), target_h),
        _to_uint8(sr),
        _to_uint8(hr),
    ]
    if heatmap is not None:
        hm = np.asarray(heatmap)
        if hm.ndim != 3 or hm.shape[2] != 3 or hm.dtype != np.uint8:
            raise ShapeError(f"heatmap must be (H,W,3) uint8, got {hm.shape} {hm.dtype}")
        if hm.shape[0] != target_h:
            hm = _nearest_upscale(hm, target_h)
        panes.append(hm)

    width = sum(p.shape[1] for p in panes) + _GUTTER * (len(panes) + 1)
    height = target_h + 2 * _GUTTER + _CAPTION_HEIGHT
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    x = _GUTTER
    for pane in panes:
        canvas[_GUTTER:_GUTTER + pane.shape[0], x:x + pane.shape[1]] = pane
        x += pane.shape[1] + _GUTTER

    psnr_text = "inf" if math.isinf(psnr_value) else f"{psnr_value:.2f}"
    caption = f"PSNR {psnr_text} dB   SSIM {ssim_value:.3f}"
    im = Image.fromarray(canvas, mode="RGB")
    draw = ImageDraw.Draw(im)
    draw.text((_GUTTER, target_h + _GUTTER + 5), caption, fill=(0, 0, 0))
    return np.asarray(im)


def emit_panel(
    lr: np.ndarray,
    sr: np.ndarray,
    hr: np.ndarray,
    out_path: str | os.PathLike,
    heatmap: np.ndarray | None = None,
) -> None:
    """Render the comparison figure and write it as a PNG.

    Identical inputs produce byte-identical files.
    """
    from .datapipe import _atomic_write_bytes, _png_bytes
    from pathlib import Path

    panel = render_panel(lr, sr, hr, heatmap)
    _atomic_write_bytes(Path(out_path), _png_bytes(panel))
