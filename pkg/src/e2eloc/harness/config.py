"""Experiment configuration and its plain-text key/value file format.

File format: one ``key = value`` per line; ``#`` starts a comment. Values are
Python literals (numbers, strings in quotes, tuples/lists, True/False, None);
a bare word that is not a literal is read as a string. Dataset settings use a
dotted prefix, e.g. ``glyph.n_train = 2000`` or ``attention.noise = 0.05``.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from ..synthdata import AttnMapDatasetConfig, GlyphDatasetConfig


@dataclass
class ExperimentConfig:
    # loss weights and gradient gates
    lam: float = 0.1
    lambda_att: float = 16.0
    lambda_aff: float = 16.0
    beta_att: float = 1.0
    beta_aff: float = 1.0
    # targets and pre-processing
    tau: float = 0.3
    steepness: float = 10.0
    binarize: str = "shifted"
    # optimisation
    optimizer: str = "adam"
    lr: float = 0.002
    loc_optimizer: str = "adam"
    loc_lr: float = 0.002
    # classifier-only warm-up (Adam) on uncropped images before the joint stage
    pretrain_epochs: int = 10
    pretrain_lr: float = 0.002
    pretrain_min_scale: float = 0.25
    lr_step: int = 6
    lr_gamma: float = 0.1
    epochs: int = 6
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0
    # model
    crop_size: int = 32
    attnet_widths: tuple[int, int] = (8, 16)
    attnet_residual: bool = True
    classifier_widths: tuple[int, ...] = (16, 32, 32)
    classifier_pools: tuple[bool, ...] = (True, False, False)
    embedding_dim: int = 64
    hidden: int = 128
    margin: float = 1.0
    center_decay: float = 0.95
    # affine-estimator benchmark
    bench_epochs: int = 5
    bench_lr: float = 0.003
    bench_batch_size: int = 32
    bench_runtime_repeats: int = 100
    bench_runtime_warmup: int = 10
    # ablation: independent seeds per row, seed, seed + 1, ...
    ablation_runs: int = 3
    # data and output
    glyph: GlyphDatasetConfig = field(default_factory=lambda: GlyphDatasetConfig(n_train=2000, n_test=1000))
    attention: AttnMapDatasetConfig = field(default_factory=AttnMapDatasetConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.glyph, dict):
            self.glyph = GlyphDatasetConfig(**self.glyph)
        if isinstance(self.attention, dict):
            self.attention = AttnMapDatasetConfig(**self.attention)
        for name in ("attnet_widths", "classifier_widths", "classifier_pools"):
            setattr(self, name, tuple(getattr(self, name)))
        for name in ("lr", "loc_lr", "pretrain_lr", "bench_lr", "lr_gamma", "steepness"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "lr_step", "batch_size", "bench_epochs", "bench_batch_size", "ablation_runs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs % self.lr_step:
            raise ValueError("lr_step must divide epochs")
        if min(self.beta_att, self.beta_aff, self.lambda_att, self.lambda_aff, self.lam) < 0:
            raise ValueError("loss weights and gates must be non-negative")
        for name in ("optimizer", "loc_optimizer"):
            if getattr(self, name) not in ("adam", "sgd"):
                raise ValueError(f"{name} must be 'adam' or 'sgd'")
        if not 0.0 < self.pretrain_min_scale <= 1.0:
            raise ValueError("pretrain_min_scale must lie in (0, 1]")
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be >= 0")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")

    @property
    def image_size(self) -> int:
        return self.glyph.image_size

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_NESTED = {"glyph": GlyphDatasetConfig, "attention": AttnMapDatasetConfig}


def parse_value(text: str) -> Any:
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_overrides(pairs: dict[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``{"key": value, "glyph.key": value}`` overrides to ``base``."""
    base = base or ExperimentConfig()
    top = {f.name for f in fields(ExperimentConfig)}
    flat: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {k: {} for k in _NESTED}
    for key, value in pairs.items():
        if "." in key:
            prefix, sub = key.split(".", 1)
            if prefix not in _NESTED or sub not in {f.name for f in fields(_NESTED[prefix])}:
                raise KeyError(f"unknown config key {key!r}")
            nested[prefix][sub] = value
        elif key in top and key not in _NESTED:
            flat[key] = value
        else:
            raise KeyError(f"unknown config key {key!r}")
    for prefix, changes in nested.items():
        if changes:
            flat[prefix] = dataclasses.replace(getattr(base, prefix), **changes)
    return dataclasses.replace(base, **flat)


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    pairs: dict[str, Any] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = parse_value(value)
    return parse_overrides(pairs, base)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _NESTED:
            for sub in fields(value):
                lines.append(f"{f.name}.{sub.name} = {getattr(value, sub.name)!r}")
        else:
            lines.append(f"{f.name} = {value!r}")
    Path(path).write_text("\n".join(lines) + "\n")
