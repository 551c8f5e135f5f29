"""Segmentation backends and the semantic consistency objective.

The consistency metric compares argmax label grids; because argmax has zero
gradient almost everywhere, training uses a differentiable surrogate computed
on the probability grids instead.
"""

from __future__ import annotations

import os
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import torch

from .errors import BackendError, ConfigError, InputError, ShapeError

__all__ = [
    "SegmentationMap",
    "Segmenter",
    "ThresholdSegmenter",
    "DeepLabV3Segmenter",
    "create_segmenter",
    "segment",
    "semantic_consistency_metric",
    "semantic_surrogate_loss",
]


@dataclass
class SegmentationMap:
    """Per-pixel class probabilities (K,H,W) plus their argmax labels (H,W).

    Ties in the argmax resolve to the lowest class index.
    """

    probs: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "SegmentationMap":
        probs = np.asarray(probs, dtype=np.float32)
        if probs.ndim != 3:
            raise ShapeError(f"expected (K,H,W) probabilities, got {probs.shape}")
        labels = np.argmax(probs, axis=0).astype(np.int64)
        out = cls(probs=probs, labels=labels)
        out.validate()
        return out

    @property
    def num_classes(self) -> int:
        return int(self.probs.shape[0])

    def validate(self) -> None:
        if self.probs.ndim != 3:
            raise ShapeError(f"expected (K,H,W) probabilities, got {self.probs.shape}")
        if self.labels.shape != self.probs.shape[1:]:
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match probs {self.probs.shape}"
            )
        if np.any(self.probs < 0.0):
            raise InputError("probabilities must be non-negative")
        sums = self.probs.sum(axis=0)
        if not np.allclose(sums, 1.0, atol=1e-5):
            raise InputError("per-pixel probabilities must sum to 1")
        if not np.array_equal(self.labels, np.argmax(self.probs, axis=0)):
            raise InputError("labels must equal the probability argmax")


class Segmenter(ABC):
    """Image -> per-pixel class distribution."""

    name: str = "base"
    num_classes: int = 0

    @abstractmethod
    def probabilities(self, image: torch.Tensor) -> torch.Tensor:
        """Differentiable (K,H,W) or (B,K,H,W) class probabilities for [0,1] input."""

    def segment(self, image: np.ndarray) -> SegmentationMap:
        with torch.no_grad():
            probs = self.probabilities(torch.from_numpy(np.ascontiguousarray(image)).float())
        return SegmentationMap.from_probs(probs.cpu().numpy())


class ThresholdSegmenter(Segmenter):
    """Two-class oracle: soft-thresholds per-pixel mean intensity at 0.5.

    Class 1 probability is sigmoid((mean - threshold) / temperature); labels
    therefore split at mean intensity == threshold.
    """

    def __init__(self, threshold: float = 0.5, temperature: float = 0.1):
        if temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {temperature}")
        self.threshold = threshold
        self.temperature = temperature
        self.name = "oracle-threshold"
        self.num_classes = 2

    def probabilities(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() not in (3, 4):
            raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {tuple(image.shape)}")
        mean = image.mean(dim=-3)
        p1 = torch.sigmoid((mean - self.threshold) / self.temperature)
        return torch.stack([1.0 - p1, p1], dim=-3)


class DeepLabV3Segmenter(Segmenter):
    """Pretrained DeepLabV3 backend loaded from a local weights file.

    Full-scale runs only; raises a backend error when torchvision or the
    weights file is unavailable.
    """

    IMAGENET_MEAN = (0.485, 0.456, 0.406)
    IMAGENET_STD = (0.229, 0.224, 0.225)

    def __init__(self, weights_path: str, num_classes: int = 21):
        self.name = f"deeplabv3:{weights_path}"
        self.num_classes = num_classes
        if not os.path.isfile(weights_path):
            raise BackendError(
                f"backend {self.name!r} unavailable: weights file not found"
            )
        try:
            from torchvision.models.segmentation import deeplabv3_resnet50
        except ImportError as exc:
            raise BackendError(
                f"backend {self.name!r} unavailable: torchvision not installed"
            ) from exc
        model = deeplabv3_resnet50(weights=None, num_classes=num_classes)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model

    def probabilities(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() not in (3, 4):
            raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {tuple(image.shape)}")
        batched = image.dim() == 4
        x = image if batched else image.unsqueeze(0)
        mean = torch.tensor(self.IMAGENET_MEAN, dtype=x.dtype).view(1, 3, 1, 1)
        std = torch.tensor(self.IMAGENET_STD, dtype=x.dtype).view(1, 3, 1, 1)
        logits = self._model((x - mean) / std)["out"]
        probs = torch.softmax(logits, dim=1)
        return probs if batched else probs.squeeze(0)


def create_segmenter(spec: str) -> Segmenter:
    """Instantiate a segmenter from a text identifier.

    Supported: "oracle-threshold" and "deeplabv3:<weights-path>".
    """
    if spec == "oracle-threshold":
        return ThresholdSegmenter()
    if spec.startswith("deeplabv3:"):
        return DeepLabV3Segmenter(spec.split(":", 1)[1])
    raise ConfigError(f"unknown segmenter backend {spec!r}")


def segment(segmenter: Segmenter, image: np.ndarray) -> SegmentationMap:
    """Segment a (3,H,W) image with values in [0,1]."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected (C,H,W) image, got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise InputError("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise InputError("image values must lie in [0, 1]")
    return segmenter.segment(image)


def semantic_consistency_metric(a: SegmentationMap, b: SegmentationMap) -> float:
    """Mean absolute difference between two label grids.

    Zero iff the grids agree everywhere; bounded by num_classes - 1.
    """
    if a.labels.shape != b.labels.shape:
        raise ShapeError(
            f"label grids differ in shape: {a.labels.shape} vs {b.labels.shape}"
        )
    diff = np.abs(a.labels.astype(np.int64) - b.labels.astype(np.int64))
    return float(diff.mean(dtype=np.float64))


def semantic_surrogate_loss(p_sr: torch.Tensor, p_hr: torch.Tensor) -> torch.Tensor:
    """Differentiable stand-in for the label-grid metric.

    Mean over pixels of the L1 distance between per-pixel probability vectors
    (the class axis is summed, pixel and batch axes are averaged).
    """
    if p_sr.shape != p_hr.shape:
        raise ShapeError(f"probability grids differ: {tuple(p_sr.shape)} vs {tuple(p_hr.shape)}")
    if p_sr.dim() not in (3, 4):
        raise ShapeError(f"expected (K,H,W) or (B,K,H,W), got {tuple(p_sr.shape)}")
    per_pixel = torch.abs(p_sr - p_hr).sum(dim=-3)
    return per_pixel.mean()
