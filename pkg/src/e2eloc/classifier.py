"""Small convolutional classifier exposing last-conv features and an embedding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor_core import functional as F
from .tensor_core.nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor_core.tensor import Tensor


@dataclass
class ClassifierConfig:
    in_channels: int = 3
    input_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64)
    # 2x2 max pool after each stage; the last stage is never pooled so its
    # output is the "last conv" feature map
    pools: tuple[bool, ...] = (True, True, False)
    embedding_dim: int = 64
    num_classes: int = 10
    batch_norm: bool = False

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.pools = tuple(bool(p) for p in self.pools)
        if len(self.widths) != len(self.pools):
            raise ValueError("widths and pools must have the same length")
        if self.pools[-1]:
            raise ValueError("the last stage must not be pooled")
        if self.embedding_dim < 2 or self.num_classes < 2:
            raise ValueError("embedding_dim and num_classes must be >= 2")
        if self.input_size % (2 ** sum(self.pools)):
            raise ValueError("input size not divisible by the pooling factor")

    @property
    def feature_size(self) -> int:
        return self.input_size // 2 ** sum(self.pools)


class ClassifierOutput(NamedTuple):
    logits: Tensor
    embedding: Tensor
    features: Tensor


class Classifier(Module):
    """conv(-bn)-relu(-pool) stages -> global average pool -> embedding -> logits."""

    def __init__(self, cfg: ClassifierConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        chans = (cfg.in_channels,) + cfg.widths
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, rng, dtype=dtype) for i in range(len(cfg.widths))]
        self.norms = [BatchNorm2d(w, dtype=dtype) for w in cfg.widths] if cfg.batch_norm else []
        self.embed = Linear(cfg.widths[-1], cfg.embedding_dim, rng, dtype=dtype)
        self.fc = Linear(cfg.embedding_dim, cfg.num_classes, rng, dtype=dtype)

    def forward(self, image: Tensor) -> ClassifierOutput:
        s = self.cfg.input_size
        if image.ndim != 4 or image.shape[1] != self.cfg.in_channels or image.shape[2:] != (s, s):
            raise ValueError(f"classifier expects (B, {self.cfg.in_channels}, {s}, {s}), got {image.shape}")
        h = image
        for i, (conv, pool) in enumerate(zip(self.convs, self.cfg.pools)):
            h = conv(h)
            if self.norms:
                h = self.norms[i](h)
            h = F.relu(h)
            if pool:
                h = F.max_pool2d(h, 2)
        embedding = self.embed(F.global_avg_pool(h))
        return ClassifierOutput(self.fc(embedding), embedding, h)
