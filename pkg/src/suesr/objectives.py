"""Training objectives: pixel, perceptual, relativistic adversarial, composite.

Adversarial terms use the relativistic average formulation in its
softplus-stable form, so they stay finite for any logit magnitude that fits
in a float.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .errors import BackendError, ConfigError, InputError, ShapeError
from .networks import LEAKY_SLOPE
from .semantics import semantic_surrogate_loss

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "FeatureExtractor",
    "RandomConvFeatureExtractor",
    "VGGFeatureExtractor",
    "create_feature_extractor",
    "pixel_loss",
    "perceptual_loss",
    "ragan_discriminator_loss",
    "ragan_generator_loss",
    "composite_generator_loss",
]


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite generator objective."""

    w_pixel: float = 0.01
    w_perceptual: float = 1.0
    w_adversarial: float = 0.005
    w_semantic: float = 0.1

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or not (v == v) or v in (float("inf"), float("-inf")):
                raise ConfigError(f"{f.name} must be finite, got {v!r}")
            if v < 0:
                raise ConfigError(f"{f.name} must be >= 0, got {v}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LossBreakdown:
    """Individual weighted-sum components of the generator objective.

    ``total`` always equals
    w_pixel*pixel + w_perceptual*perceptual + w_adversarial*adversarial
    + w_semantic*semantic, evaluated with the exact same expression used in
    training.
    """

    pixel: torch.Tensor
    perceptual: torch.Tensor
    adversarial: torch.Tensor
    semantic: torch.Tensor
    total: torch.Tensor

    def detach_floats(self) -> dict[str, float]:
        return {
            "pixel": float(self.pixel.detach()),
            "perceptual": float(self.perceptual.detach()),
            "adversarial": float(self.adversarial.detach()),
            "semantic": float(self.semantic.detach()),
            "total": float(self.total.detach()),
        }


class FeatureExtractor(ABC):
    """Image -> deep feature grids, used by the perceptual and LPIPS terms."""

    name: str = "base"

    @abstractmethod
    def stages(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Feature grids at increasing depth for a (C,H,W) or (B,C,H,W) input."""

    def features(self, image: torch.Tensor) -> torch.Tensor:
        """The deepest feature grid."""
        return self.stages(image)[-1]


class RandomConvFeatureExtractor(FeatureExtractor):
    """Frozen, seeded stack of random convolutions.

    A hermetic stand-in for a pretrained backbone: deterministic per seed,
    differentiable w.r.t. its input, no external weights. Each stage is
    conv3x3 -> leaky ReLU, with 2x average pooling between stages.
    """

    def __init__(self, seed: int = 0, in_channels: int = 3,
                 widths: tuple[int, ...] = (8, 16, 16)):
        if not widths:
            raise ConfigError("widths must be non-empty")
        self.seed = seed
        self.name = f"random-conv:{seed}"
        gen = torch.Generator(device="cpu")
        gen.manual_seed(seed)
        self._weights: list[torch.Tensor] = []
        prev = in_channels
        for width in widths:
            std = (2.0 / (prev * 9)) ** 0.5
            w = torch.empty(width, prev, 3, 3)
            with torch.no_grad():
                w.normal_(0.0, std, generator=gen)
            w.requires_grad_(False)
            self._weights.append(w)
            prev = width

    def stages(self, image: torch.Tensor) -> list[torch.Tensor]:
        if image.dim() not in (3, 4):
            raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {tuple(image.shape)}")
        batched = image.dim() == 4
        h = image if batched else image.unsqueeze(0)
        outs = []
        for i, w in enumerate(self._weights):
            if i > 0:
                h = F.avg_pool2d(h, 2, ceil_mode=True)
            h = F.leaky_relu(F.conv2d(h, w.to(h.dtype), padding=1), LEAKY_SLOPE)
            outs.append(h)
        return outs if batched else [o.squeeze(0) for o in outs]


class VGGFeatureExtractor(FeatureExtractor):
    """VGG19 features loaded from a local weights file (full-scale runs)."""

    # indices just before each max-pool in torchvision's vgg19.features
    STAGE_ENDS = (3, 8, 17, 26, 35)
    IMAGENET_MEAN = (0.485, 0.456, 0.406)
    IMAGENET_STD = (0.229, 0.224, 0.225)

    def __init__(self, weights_path: str):
        import os

        self.name = f"vgg19:{weights_path}"
        if not os.path.isfile(weights_path):
            raise BackendError(f"backend {self.name!r} unavailable: weights file not found")
        try:
            from torchvision.models import vgg19
        except ImportError as exc:
            raise BackendError(
                f"backend {self.name!r} unavailable: torchvision not installed"
            ) from exc
        model = vgg19(weights=None)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        self._features = model.features.eval()
        for p in self._features.parameters():
            p.requires_grad_(False)

    def stages(self, image: torch.Tensor) -> list[torch.Tensor]:
        if image.dim() not in (3, 4):
            raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {tuple(image.shape)}")
        batched = image.dim() == 4
        x = image if batched else image.unsqueeze(0)
        mean = torch.tensor(self.IMAGENET_MEAN, dtype=x.dtype).view(1, 3, 1, 1)
        std = torch.tensor(self.IMAGENET_STD, dtype=x.dtype).view(1, 3, 1, 1)
        h = (x - mean) / std
        outs = []
        for i, layer in enumerate(self._features):
            h = layer(h)
            if i in self.STAGE_ENDS:
                outs.append(h)
            if i >= self.STAGE_ENDS[-1]:
                break
        return outs if batched else [o.squeeze(0) for o in outs]


def create_feature_extractor(spec: str) -> FeatureExtractor:
    """Instantiate an extractor from "random-conv[:seed]" or "vgg19:<path>"."""
    if spec == "random-conv":
        return RandomConvFeatureExtractor()
    if spec.startswith("random-conv:"):
        try:
            seed = int(spec.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad random-conv seed in {spec!r}") from exc
        return RandomConvFeatureExtractor(seed=seed)
    if spec.startswith("vgg19:"):
        return VGGFeatureExtractor(spec.split(":", 1)[1])
    raise ConfigError(f"unknown feature extractor backend {spec!r}")


def _as_pair(sr: torch.Tensor, hr: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    sr = torch.as_tensor(sr)
    hr = torch.as_tensor(hr)
    if sr.shape != hr.shape:
        raise ShapeError(f"shape mismatch: {tuple(sr.shape)} vs {tuple(hr.shape)}")
    return sr, hr


def pixel_loss(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    """Mean absolute per-pixel difference."""
    sr, hr = _as_pair(sr, hr)
    return torch.abs(sr - hr).mean()


def perceptual_loss(sr: torch.Tensor, hr: torch.Tensor,
                    extractor: FeatureExtractor) -> torch.Tensor:
    """Mean absolute difference between the deepest feature grids."""
    sr, hr = _as_pair(sr, hr)
    return torch.abs(extractor.features(sr) - extractor.features(hr)).mean()


def _as_logits(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not torch.is_floating_point(t):
        t = t.to(torch.get_default_dtype())
    t = t.reshape(-1)
    if t.numel() == 0:
        raise InputError("logit set must be non-empty")
    return t


def ragan_discriminator_loss(real_logits, fake_logits) -> torch.Tensor:
    """Relativistic average discriminator loss.

    softplus(-(r - mean(f))) averaged over real logits plus
    softplus(f - mean(r)) averaged over fake logits. Equal logit sets give
    2*ln(2).
    """
    r = _as_logits(real_logits)
    f = _as_logits(fake_logits)
    loss_real = F.softplus(-(r - f.mean())).mean()
    loss_fake = F.softplus(f - r.mean()).mean()
    return loss_real + loss_fake


def ragan_generator_loss(real_logits, fake_logits) -> torch.Tensor:
    """Relativistic average generator loss (roles of real/fake mirrored)."""
    r = _as_logits(real_logits)
    f = _as_logits(fake_logits)
    loss_fake = F.softplus(-(f - r.mean())).mean()
    loss_real = F.softplus(r - f.mean()).mean()
    return loss_fake + loss_real


def composite_generator_loss(
    sr: torch.Tensor,
    hr: torch.Tensor,
    real_logits,
    fake_logits,
    p_sr: torch.Tensor,
    p_hr: torch.Tensor,
    weights: LossWeights,
    extractor: FeatureExtractor,
) -> LossBreakdown:
    """Weighted sum of pixel, perceptual, adversarial and semantic terms.

    ``p_sr``/``p_hr`` are per-pixel class probability grids for the generated
    and reference images (see the semantics module).
    """
    weights.validate()
    pix = pixel_loss(sr, hr)
    perc = perceptual_loss(sr, hr, extractor)
    adv = ragan_generator_loss(real_logits, fake_logits)
    sem = semantic_surrogate_loss(p_sr, p_hr)
    total = (
        weights.w_pixel * pix
        + weights.w_perceptual * perc
        + weights.w_adversarial * adv
        + weights.w_semantic * sem
    )
    return LossBreakdown(pixel=pix, perceptual=perc, adversarial=adv,
                         semantic=sem, total=total)
