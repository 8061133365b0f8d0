"""Attention prediction, differentiable pre-processing and affine estimation.

The localization pathway turns an input image into a crop:

    image -> AttNet -> attention map A -> Preprocess -> AffNet -> theta
    crop = bilinear_sample(image, theta)

``theta`` is ``[s_x, s_y, t_x, t_y]``; ``[1, 1, 0, 0]`` is the identity crop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .tensor_core import functional as F
from .tensor_core.nn import Conv2d, Linear, Module, Parameter, ResidualBlock
from .tensor_core.tensor import Tensor

IDENTITY_THETA = np.array([1.0, 1.0, 0.0, 0.0])


@dataclass
class AttNetConfig:
    in_channels: int = 3
    input_size: int = 64
    widths: tuple[int, int] = (16, 32)
    residual: bool = True
    map_size: int = 16

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.map_size < 2:
            raise ValueError("attention map must be at least 2x2")
        if self.input_size % 4 or self.input_size // 4 != self.map_size:
            raise ValueError(
                f"AttNet downsamples by 4: input {self.input_size} cannot give a {self.map_size}x{self.map_size} map"
            )


@dataclass
class PreprocessConfig:
    tau: float = 0.3
    steepness: float = 10.0
    eps: float = 1e-6
    # "shifted": 2*sigmoid(k*T) - 1 (background -> 0); "sigmoid": sigmoid(k*T)
    binarize: str = "shifted"

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.steepness <= 0:
            raise ValueError("steepness must be positive")
        if self.binarize not in ("shifted", "sigmoid"):
            raise ValueError(f"unknown binarize mode {self.binarize!r}")


@dataclass
class AffNetConfig:
    map_size: tuple[int, int] = (16, 16)
    hidden: int = 128
    preprocess: PreprocessConfig | None = field(default_factory=PreprocessConfig)

    def __post_init__(self):
        if isinstance(self.map_size, int):
            self.map_size = (self.map_size, self.map_size)
        self.map_size = tuple(self.map_size)
        if min(self.map_size) < 2:
            raise ValueError("attention map must be at least 2x2")
        if isinstance(self.preprocess, dict):
            self.preprocess = PreprocessConfig(**self.preprocess)


class AttNet(Module):
    """Lightweight conv stack: image (B, C, S, S) -> attention map (B, 1, S/4, S/4)."""

    def __init__(self, cfg: AttNetConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        w1, w2 = cfg.widths
        self.stem = Conv2d(cfg.in_channels, w1, 3, rng, stride=2, dtype=dtype)
        self.block = ResidualBlock(w1, rng, dtype=dtype) if cfg.residual else None
        self.down = Conv2d(w1, w2, 3, rng, stride=2, dtype=dtype)
        self.head = Conv2d(w2, 1, 1, rng, dtype=dtype)

    def forward(self, image: Tensor) -> Tensor:
        s = self.cfg.input_size
        if image.shape[1] != self.cfg.in_channels or image.shape[2:] != (s, s):
            raise ValueError(f"AttNet expects (B, {self.cfg.in_channels}, {s}, {s}), got {image.shape}")
        h = F.relu(self.stem(image))
        if self.block is not None:
            h = self.block(h)
        h = F.relu(self.down(h))
        return self.head(h)


class Preprocess(Module):
    """Min-max normalise, threshold at the learnable ``w_tau``, soft-binarise.

    Per sample: N = (A - min) / (max - min + eps), T = relu(N - w_tau),
    P = 2 * sigmoid(k * T) - 1. A constant map yields P = 0 and is recorded in
    ``last_degenerate``.
    """

    def __init__(self, cfg: PreprocessConfig, dtype=np.float32):
        self.cfg = cfg
        self.w_tau = Parameter(np.array([cfg.tau], dtype=dtype))
        self.last_degenerate = np.zeros(0, dtype=bool)

    def forward(self, attention: Tensor) -> Tensor:
        axes = tuple(range(1, attention.ndim))
        lo = F.amin(attention, axis=axes, keepdims=True)
        hi = F.amax(attention, axis=axes, keepdims=True)
        self.last_degenerate = (hi.data == lo.data).reshape(-1)
        span = F.add(F.sub(hi, lo), self.cfg.eps)
        normed = F.div(F.sub(attention, lo), span)
        thresholded = F.relu(F.sub(normed, self.w_tau))
        soft = F.sigmoid(F.mul(thresholded, self.cfg.steepness))
        if self.cfg.binarize == "sigmoid":
            return soft
        return F.sub(F.mul(soft, 2.0), 1.0)


class _Head(Module):
    """Linear(n -> hidden) - ReLU - Linear(hidden -> 2) giving (scale, shift)."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.hidden = Linear(n_in, hidden, rng, dtype=dtype)
        self.out = Linear(hidden, 2, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(F.relu(self.hidden(x)))


class AffNet(Module):
    """Affine parameter estimation from an attention map.

    Max pooling with an I x 1 kernel gives the horizontal profile (length J)
    that feeds ``nn_h`` -> (s_x, t_x); a 1 x J kernel gives the vertical
    profile (length I) that feeds ``nn_v`` -> (s_y, t_y).
    """

    def __init__(self, cfg: AffNetConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        i, j = cfg.map_size
        self.prep = Preprocess(cfg.preprocess, dtype=dtype) if cfg.preprocess is not None else None
        self.nn_h = _Head(j, cfg.hidden, rng, dtype=dtype)
        self.nn_v = _Head(i, cfg.hidden, rng, dtype=dtype)
        init_identity(self)

    def forward(self, attention: Tensor) -> Tensor:
        if attention.shape[1:] != (1,) + self.cfg.map_size:
            raise ValueError(f"AffNet expects (B, 1, {self.cfg.map_size}), got {attention.shape}")
        p = self.prep(attention) if self.prep is not None else attention
        horiz = self.nn_h(F.directional_max_pool(p, "vertical"))  # (s_x, t_x)
        vert = self.nn_v(F.directional_max_pool(p, "horizontal"))  # (s_y, t_y)
        both = F.concatenate([horiz, vert], axis=1)
        return F.take(both, [0, 2, 1, 3], axis=1)


def affnet_parameter_count(map_size: tuple[int, int], hidden: int = 128, preprocess: bool = False) -> int:
    """Closed-form learnable parameter count of :class:`AffNet`."""
    i, j = map_size
    heads = (j + 1) * hidden + (hidden + 1) * 2 + (i + 1) * hidden + (hidden + 1) * 2
    return heads + int(preprocess)


def init_identity(affnet: Module) -> None:
    """Zero the output layers and set their biases so theta starts at identity.

    Each head's output bias becomes (1, 0) for (scale, shift); the hidden
    layers keep their random init. ``w_tau`` is reset to its configured tau.
    """
    for head in (affnet.nn_h, affnet.nn_v):
        head.out.weight.data[...] = 0.0
        head.out.bias.data[...] = np.array([1.0, 0.0], dtype=head.out.bias.dtype)
    if getattr(affnet, "prep", None) is not None:
        affnet.prep.w_tau.data[...] = affnet.prep.cfg.tau


class Localized(NamedTuple):
    crop: Tensor
    theta: Tensor
    attention: Tensor


class Localizer(Module):
    """AttNet + AffNet + bilinear cropping with the two gradient gates.

    ``beta_att`` scales the gradient reaching the attention map from
    everything downstream of it (AffNet and the classifier); ``beta_aff``
    scales the gradient reaching theta from the crop. Local losses attached
    directly to the returned ``attention`` and ``theta`` are not gated.
    """

    def __init__(
        self,
        attnet_cfg: AttNetConfig,
        affnet_cfg: AffNetConfig,
        crop_size: int,
        rng: np.random.Generator,
        beta_att: float = 1.0,
        beta_aff: float = 1.0,
        dtype=np.float32,
    ):
        if affnet_cfg.map_size != (attnet_cfg.map_size, attnet_cfg.map_size):
            raise ValueError("AffNet map size must match the AttNet output size")
        self.attnet = AttNet(attnet_cfg, rng, dtype=dtype)
        self.affnet = AffNet(affnet_cfg, rng, dtype=dtype)
        self.crop_size = crop_size
        self.beta_att = beta_att
        self.beta_aff = beta_aff

    def forward(self, image: Tensor) -> Localized:
        s = self.attnet.cfg.input_size
        attention = self.attnet(F.resize_bilinear(image, s, s))
        theta = self.affnet(F.grad_scale(attention, self.beta_att))
        crop = F.bilinear_sample(image, F.grad_scale(theta, self.beta_aff), self.crop_size, self.crop_size)
        return Localized(crop, theta, attention)

