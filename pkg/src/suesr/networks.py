"""Generator and discriminator networks for x4 super-resolution.

The generator is an RRDB trunk (residual-in-residual dense blocks) with a
dropout stage after the head convolution, a global skip connection around the
trunk, and two pixel-shuffle upsampling stages. The discriminator is a
VGG-style strided conv stack ending in a two-layer classifier head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError, ShapeError, SizeError

LEAKY_SLOPE = 0.2

__all__ = [
    "LEAKY_SLOPE",
    "GeneratorConfig",
    "DiscriminatorConfig",
    "DropoutMode",
    "ParameterSet",
    "Generator",
    "Discriminator",
    "pixel_shuffle",
    "pixel_unshuffle",
    "build_generator",
    "build_discriminator",
    "generator_forward",
    "discriminator_forward",
]


@dataclass(frozen=True)
class GeneratorConfig:
    """Architecture knobs for the generator.

    Defaults give the full-scale model: 5 RRDBs of 3 dense blocks, 64 base
    channels, growth 32, dropout 0.2, x4 upsampling.
    """

    in_channels: int = 3
    base_channels: int = 64
    num_rrdb: int = 5
    growth_channels: int = 32
    dense_blocks_per_rrdb: int = 3
    convs_per_dense: int = 5
    residual_scaling: float = 0.2
    dropout_rate: float = 0.2
    scale_factor: int = 4

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.num_rrdb < 1:
            raise ConfigError(f"num_rrdb must be >= 1, got {self.num_rrdb}")
        if self.growth_channels < 1:
            raise ConfigError(f"growth_channels must be >= 1, got {self.growth_channels}")
        if self.dense_blocks_per_rrdb < 1:
            raise ConfigError(
                f"dense_blocks_per_rrdb must be >= 1, got {self.dense_blocks_per_rrdb}"
            )
        if self.convs_per_dense < 2:
            raise ConfigError(f"convs_per_dense must be >= 2, got {self.convs_per_dense}")
        if not (0.0 < self.residual_scaling <= 1.0):
            raise ConfigError(
                f"residual_scaling must be in (0, 1], got {self.residual_scaling}"
            )
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.scale_factor != 4:
            raise ConfigError(f"scale_factor must be 4, got {self.scale_factor}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Architecture knobs for the VGG-style discriminator."""

    in_channels: int = 3
    base_channels: int = 64
    input_size: int = 256

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        # five stride-2 stages halve the input five times
        if self.input_size < 32 or self.input_size % 32 != 0:
            raise ConfigError(
                f"input_size must be a positive multiple of 32, got {self.input_size}"
            )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class DropoutMode:
    """Whether the generator's dropout stage is active, and with which seed.

    Use :meth:`disabled` for deterministic forwards and :meth:`stochastic`
    for a seeded random pass (Monte-Carlo sampling, training steps).
    """

    active: bool
    seed: int | None = None

    @classmethod
    def disabled(cls) -> "DropoutMode":
        return cls(active=False, seed=None)

    @classmethod
    def stochastic(cls, seed: int) -> "DropoutMode":
        if seed < 0:
            raise InputError(f"dropout seed must be non-negative, got {seed}")
        return cls(active=True, seed=int(seed))


class ParameterSet:
    """Ordered, named mapping of parameter arrays.

    Arrays are numpy copies detached from any torch module; order follows the
    module's registration order so serialization is reproducible.
    """

    def __init__(self, arrays: dict[str, np.ndarray]):
        self._arrays: dict[str, np.ndarray] = {}
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if not np.all(np.isfinite(arr)):
                raise InputError(f"parameter array {name!r} contains non-finite values")
            self._arrays[name] = arr

    @classmethod
    def from_module(cls, module: nn.Module, include_buffers: bool = False) -> "ParameterSet":
        arrays: dict[str, np.ndarray] = {}
        for name, p in module.named_parameters():
            arrays[name] = p.detach().cpu().numpy().copy()
        if include_buffers:
            for name, b in module.named_buffers():
                arrays[name] = b.detach().cpu().numpy().copy()
        return cls(arrays)

    def apply_to(self, module: nn.Module) -> None:
        """Load these arrays into a module's parameters/buffers by name."""
        tensors = dict(module.named_parameters())
        tensors.update(dict(module.named_buffers()))
        missing = [n for n in tensors if n not in self._arrays]
        if missing:
            raise ShapeError(f"parameter set is missing entries: {missing[:5]}")
        with torch.no_grad():
            for name, arr in self._arrays.items():
                if name not in tensors:
                    raise ShapeError(f"module has no parameter named {name!r}")
                t = tensors[name]
                if tuple(t.shape) != arr.shape:
                    raise ShapeError(
                        f"shape mismatch for {name!r}: module {tuple(t.shape)}, "
                        f"set {arr.shape}"
                    )
                # as_tensor keeps 0-d arrays 0-d (ascontiguousarray would not)
                t.copy_(torch.as_tensor(arr, dtype=t.dtype))

    def names(self) -> list[str]:
        return list(self._arrays)

    def total_parameters(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def copy(self) -> "ParameterSet":
        return ParameterSet({n: a.copy() for n, a in self._arrays.items()})

    def allclose(self, other: "ParameterSet", atol: float = 0.0) -> bool:
        if self.names() != other.names():
            return False
        return all(
            np.allclose(self._arrays[n], other._arrays[n], rtol=0.0, atol=atol)
            for n in self._arrays
        )

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, arr: np.ndarray) -> None:
        if name not in self._arrays:
            raise KeyError(name)
        arr = np.asarray(arr)
        if arr.shape != self._arrays[name].shape:
            raise ShapeError(f"shape mismatch for {name!r}")
        self._arrays[name] = arr

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._arrays.items())

    def __len__(self) -> int:
        return len(self._arrays)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays


def pixel_shuffle(x: torch.Tensor, upscale: int) -> torch.Tensor:
    """Rearrange (..., C*r*r, H, W) into (..., C, H*r, W*r).

    Output pixel (c, r*y + dy, r*x + dx) takes input channel c*r*r + dy*r + dx
    at position (y, x).
    """
    if upscale < 1:
        raise InputError(f"upscale must be >= 1, got {upscale}")
    if x.dim() < 3:
        raise ShapeError(f"expected at least 3 dims, got shape {tuple(x.shape)}")
    c2, h, w = x.shape[-3:]
    r = upscale
    if c2 % (r * r) != 0:
        raise ShapeError(f"channel count {c2} not divisible by {r * r}")
    c = c2 // (r * r)
    lead = x.shape[:-3]
    y = x.reshape(*lead, c, r, r, h, w)
    # (..., c, dy, dx, h, w) -> (..., c, h, dy, w, dx)
    perm = list(range(len(lead))) + [
        len(lead) + 0,
        len(lead) + 3,
        len(lead) + 1,
        len(lead) + 4,
        len(lead) + 2,
    ]
    return y.permute(perm).reshape(*lead, c, h * r, w * r)


def pixel_unshuffle(x: torch.Tensor, downscale: int) -> torch.Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if downscale < 1:
        raise InputError(f"downscale must be >= 1, got {downscale}")
    if x.dim() < 3:
        raise ShapeError(f"expected at least 3 dims, got shape {tuple(x.shape)}")
    c, hr, wr = x.shape[-3:]
    r = downscale
    if hr % r != 0 or wr % r != 0:
        raise ShapeError(f"spatial size ({hr}, {wr}) not divisible by {r}")
    h, w = hr // r, wr // r
    lead = x.shape[:-3]
    y = x.reshape(*lead, c, h, r, w, r)
    perm = list(range(len(lead))) + [
        len(lead) + 0,
        len(lead) + 2,
        len(lead) + 4,
        len(lead) + 1,
        len(lead) + 3,
    ]
    return y.permute(perm).reshape(*lead, c * r * r, h, w)


def _dropout(x: torch.Tensor, rate: float, gen: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout with an explicit RNG; identity when rate is 0 or gen is None."""
    if rate == 0.0 or gen is None:
        return x
    keep = (
        torch.rand(x.shape, generator=gen, device=x.device, dtype=x.dtype) >= rate
    ).to(x.dtype)
    return x * keep / (1.0 - rate)


class _DenseBlock(nn.Module):
    """Densely connected conv block with a locally scaled residual."""

    def __init__(self, channels: int, growth: int, n_convs: int, res_scale: float):
        super().__init__()
        self.res_scale = res_scale
        convs = []
        for i in range(n_convs - 1):
            convs.append(nn.Conv2d(channels + i * growth, growth, 3, 1, 1))
        self.convs = nn.ModuleList(convs)
        self.conv_out = nn.Conv2d(channels + (n_convs - 1) * growth, channels, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(F.leaky_relu(conv(torch.cat(feats, dim=-3)), LEAKY_SLOPE))
        out = self.conv_out(torch.cat(feats, dim=-3))
        return x + self.res_scale * out


class _RRDB(nn.Module):
    """Residual-in-residual stack of dense blocks."""

    def __init__(self, channels: int, growth: int, n_blocks: int, n_convs: int,
                 res_scale: float):
        super().__init__()
        self.res_scale = res_scale
        self.dense = nn.ModuleList(
            _DenseBlock(channels, growth, n_convs, res_scale) for _ in range(n_blocks)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = x
        for block in self.dense:
            out = block(out)
        return x + self.res_scale * out


class Generator(nn.Module):
    """RRDB super-resolution generator with a MC-dropout stage after the head.

    The trunk output is added to the post-dropout head features, so a trunk
    whose parameters are all zero reduces the pre-upsample features to the
    head features alone.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        config.validate()
        self.config = config
        b, g = config.base_channels, config.growth_channels
        self.conv_head = nn.Conv2d(config.in_channels, b, 3, 1, 1)
        self.blocks = nn.ModuleList(
            _RRDB(b, g, config.dense_blocks_per_rrdb, config.convs_per_dense,
                  config.residual_scaling)
            for _ in range(config.num_rrdb)
        )
        self.conv_trunk = nn.Conv2d(b, b, 3, 1, 1)
        # each upsample conv feeds a x2 pixel shuffle, so 4x the channels
        self.conv_up1 = nn.Conv2d(b, b * 4, 3, 1, 1)
        self.conv_up2 = nn.Conv2d(b, b * 4, 3, 1, 1)
        self.conv_tail = nn.Conv2d(b, config.in_channels, 3, 1, 1)

    def _rng_for(self, mode: DropoutMode) -> torch.Generator | None:
        if not mode.active:
            return None
        if mode.seed is None:
            raise InputError("stochastic dropout mode requires a seed")
        gen = torch.Generator(device="cpu")
        gen.manual_seed(mode.seed)
        return gen

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            batched = False
        elif x.dim() == 4:
            batched = True
        else:
            raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {tuple(x.shape)}")
        c, h, w = x.shape[-3:]
        if c != self.config.in_channels:
            raise ShapeError(
                f"expected {self.config.in_channels} channels, got {c}"
            )
        if h < 8 or w < 8:
            raise SizeError(f"input spatial size must be >= 8, got ({h}, {w})")
        if not torch.isfinite(x).all():
            raise InputError("input image contains non-finite values")
        return x if batched else x.unsqueeze(0)

    def features(self, x: torch.Tensor, mode: DropoutMode) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (post-dropout head features, pre-upsample fused features)."""
        rng = self._rng_for(mode)
        head = self.conv_head(x)
        head = _dropout(head, self.config.dropout_rate, rng)
        body = head
        for block in self.blocks:
            body = block(body)
        fused = head + self.conv_trunk(body)
        return head, fused

    def forward(self, x: torch.Tensor, mode: DropoutMode | None = None) -> torch.Tensor:
        if mode is None:
            mode = DropoutMode.disabled()
        batched = x.dim() == 4
        x4 = self._check_input(x)
        _, fused = self.features(x4, mode)
        up = F.leaky_relu(pixel_shuffle(self.conv_up1(fused), 2), LEAKY_SLOPE)
        up = F.leaky_relu(pixel_shuffle(self.conv_up2(up), 2), LEAKY_SLOPE)
        out = self.conv_tail(up)
        return out if batched else out.squeeze(0)


class Discriminator(nn.Module):
    """VGG-style discriminator: five stride-2 stages then a small MLP head.

    BatchNorm layers follow every conv except the very first, matching the
    relativistic-GAN reference design.
    """

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        config.validate()
        self.config = config
        b = config.base_channels
        widths = [b, b * 2, b * 4, b * 8, b * 8]
        layers: list[nn.Module] = [
            nn.Conv2d(config.in_channels, b, 3, 1, 1),
            nn.LeakyReLU(LEAKY_SLOPE),
        ]
        prev = b
        for i, width in enumerate(widths):
            if i > 0:
                layers += [
                    nn.Conv2d(prev, width, 3, 1, 1, bias=False),
                    nn.BatchNorm2d(width),
                    nn.LeakyReLU(LEAKY_SLOPE),
                ]
            layers += [
                nn.Conv2d(width, width, 4, 2, 1, bias=False),
                nn.BatchNorm2d(width),
                nn.LeakyReLU(LEAKY_SLOPE),
            ]
            prev = width
        self.features = nn.Sequential(*layers)
        spatial = config.input_size // 32
        self.classifier = nn.Sequential(
            nn.Linear(widths[-1] * spatial * spatial, 100),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(100, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
            squeeze = True
        elif x.dim() == 4:
            squeeze = False
        else:
            raise ShapeError(f"expected (C,S,S) or (B,C,S,S), got {tuple(x.shape)}")
        c, h, w = x.shape[-3:]
        if c != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} channels, got {c}")
        if h != self.config.input_size or w != self.config.input_size:
            raise ShapeError(
                f"expected input size {self.config.input_size}, got ({h}, {w})"
            )
        feat = self.features(x)
        logit = self.classifier(feat.flatten(1))
        return logit.squeeze(0) if squeeze else logit


def _init_conv(conv: nn.Conv2d, gen: torch.Generator, scale: float) -> None:
    # Kaiming-normal for the leaky slope, optionally damped for residual branches.
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    gain_sq = 2.0 / (1.0 + LEAKY_SLOPE**2)
    std = math.sqrt(gain_sq / fan_in) * scale
    with torch.no_grad():
        conv.weight.normal_(0.0, std, generator=gen)
        if conv.bias is not None:
            conv.bias.zero_()


def _init_linear(lin: nn.Linear, gen: torch.Generator) -> None:
    std = math.sqrt(2.0 / ((1.0 + LEAKY_SLOPE**2) * lin.in_features))
    with torch.no_grad():
        lin.weight.normal_(0.0, std, generator=gen)
        if lin.bias is not None:
            lin.bias.zero_()


def _seeded_init(module: nn.Module, seed: int) -> None:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(seed)
    for name, sub in module.named_modules():
        if isinstance(sub, nn.Conv2d):
            # convs inside dense blocks start damped so residuals begin small
            scale = 0.1 if ".dense." in name else 1.0
            _init_conv(sub, gen, scale)
        elif isinstance(sub, nn.Linear):
            _init_linear(sub, gen)
        elif isinstance(sub, nn.BatchNorm2d):
            with torch.no_grad():
                sub.weight.fill_(1.0)
                sub.bias.zero_()
                sub.running_mean.zero_()
                sub.running_var.fill_(1.0)


def build_generator(config: GeneratorConfig, init_seed: int = 0) -> tuple[Generator, ParameterSet]:
    """Construct and deterministically initialize a generator.

    Returns the module and a snapshot of its initial parameters. Identical
    (config, init_seed) pairs produce bit-identical snapshots.
    """
    config.validate()
    if init_seed < 0:
        raise InputError(f"init_seed must be non-negative, got {init_seed}")
    gen = Generator(config)
    _seeded_init(gen, init_seed)
    return gen, ParameterSet.from_module(gen)


def build_discriminator(config: DiscriminatorConfig, init_seed: int = 0) -> tuple[Discriminator, ParameterSet]:
    """Construct and deterministically initialize a discriminator."""
    config.validate()
    if init_seed < 0:
        raise InputError(f"init_seed must be non-negative, got {init_seed}")
    disc = Discriminator(config)
    _seeded_init(disc, init_seed)
    return disc, ParameterSet.from_module(disc)


def generator_forward(gen: Generator, image: torch.Tensor, mode: DropoutMode) -> torch.Tensor:
    """Run one super-resolution pass; output is 4x the input spatially."""
    return gen(image, mode)


def discriminator_forward(disc: Discriminator, image: torch.Tensor) -> float:
    """Deterministic single-image realness logit (eval mode, running BN stats)."""
    was_training = disc.training
    disc.eval()
    try:
        with torch.no_grad():
            logit = disc(image)
    finally:
        disc.train(was_training)
    return float(logit.reshape(()).item())
