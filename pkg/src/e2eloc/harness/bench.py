"""Comparison of affine-parameter estimators on synthetic attention maps.

Every architecture maps a (B, 1, 16, 16) attention map to theta (B, 4) and is
trained with smooth L1 against the box-derived targets, once on the raw maps
and once behind the learnable pre-processing module.
"""

from __future__ import annotations

import logging
import time
from pathlib import Path
from typing import Callable

import numpy as np

from ..localization import AffNet, AffNetConfig, Preprocess, PreprocessConfig
from ..synthdata import AttnMapDataset, gen_attention_dataset
from ..tensor_core import functional as F
from ..tensor_core.nn import BatchNorm1d, Conv2d, Linear, Module, ResidualBlock
from ..tensor_core.optim import Adam
from ..tensor_core.tensor import Tensor, no_grad
from .config import ExperimentConfig
from .metrics import MetricsRow, box_iou_batch, write_rows

log = logging.getLogger(__name__)

_IDENTITY_BIAS = np.array([1.0, 1.0, 0.0, 0.0])


class FFNN(Module):
    """Flattened map -> Linear(32) -> BatchNorm -> ReLU -> Linear(4)."""

    def __init__(self, map_size: int, rng: np.random.Generator, hidden: int = 32):
        self.fc1 = Linear(map_size * map_size, hidden, rng)
        self.bn = BatchNorm1d(hidden)
        self.out = Linear(hidden, 4, rng)
        self.out.bias.data[...] = _IDENTITY_BIAS

    def forward(self, x: Tensor) -> Tensor:
        return self.out(F.relu(self.bn(self.fc1(F.flatten(x)))))


class ConvNetS(Module):
    """Shallow residual conv net (stem, one residual block, downsample) with a linear readout."""

    def __init__(self, map_size: int, rng: np.random.Generator, widths: tuple[int, int] = (16, 32)):
        w1, w2 = widths
        self.stem = Conv2d(1, w1, 3, rng)
        self.block = ResidualBlock(w1, rng)
        self.down = Conv2d(w1, w2, 3, rng, stride=2)
        self.out = Linear(w2 * (map_size // 2) ** 2, 4, rng)
        self.out.weight.data *= 0.1
        self.out.bias.data[...] = _IDENTITY_BIAS

    def forward(self, x: Tensor) -> Tensor:
        h = self.block(F.relu(self.stem(x)))
        h = F.relu(self.down(h))
        return self.out(F.flatten(h))


class ConvNetL(Module):
    """Deep residual conv net on the map upsampled to 64 x 64, global average pool head."""

    def __init__(self, rng: np.random.Generator, widths: tuple[int, ...] = (16, 32, 64), blocks: int = 2,
                 input_size: int = 64):
        self.input_size = input_size
        chans = (1,) + tuple(widths)
        self.stages = [Conv2d(chans[i], chans[i + 1], 3, rng, stride=2) for i in range(len(widths))]
        self.blocks = [ResidualBlock(w, rng) for w in widths for _ in range(blocks)]
        self.n_blocks = blocks
        self.out = Linear(widths[-1], 4, rng)
        self.out.bias.data[...] = _IDENTITY_BIAS

    def forward(self, x: Tensor) -> Tensor:
        h = F.resize_bilinear(x, self.input_size, self.input_size)
        for i, conv in enumerate(self.stages):
            h = F.relu(conv(h))
            for block in self.blocks[i * self.n_blocks : (i + 1) * self.n_blocks]:
                h = block(h)
        return self.out(F.global_avg_pool(h))


class WithPreprocess(Module):
    def __init__(self, body: Module, prep: PreprocessConfig):
        self.prep = Preprocess(prep)
        self.body = body

    def forward(self, x: Tensor) -> Tensor:
        return self.body(self.prep(x))


def _affnet(map_size: int, rng: np.random.Generator, prep: PreprocessConfig | None, hidden: int) -> Module:
    return AffNet(AffNetConfig(map_size=(map_size, map_size), hidden=hidden, preprocess=prep), rng)


ARCHITECTURES = ("FFNN", "ConvNet-S", "ConvNet-L", "AffNet")


def build_estimator(name: str, cfg: ExperimentConfig, preprocess: bool, rng: np.random.Generator) -> Module:
    n = cfg.attention.map_size
    prep = PreprocessConfig(tau=cfg.tau, steepness=cfg.steepness, binarize=cfg.binarize) if preprocess else None
    if name == "AffNet":
        return _affnet(n, rng, prep, cfg.hidden)
    if name == "FFNN":
        body = FFNN(n, rng)
    elif name == "ConvNet-S":
        body = ConvNetS(n, rng)
    elif name == "ConvNet-L":
        body = ConvNetL(rng)
    else:
        raise ValueError(f"unknown architecture {name!r}")
    return WithPreprocess(body, prep) if prep is not None else body


def predict_thetas(model: Module, maps: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(maps), batch_size):
            out.append(model(Tensor(maps[i : i + batch_size])).data)
    model.train()
    return np.concatenate(out).astype(np.float64)


def smooth_l1_error(pred: np.ndarray, target: np.ndarray) -> float:
    d = np.abs(pred - target)
    return float(np.where(d < 1.0, 0.5 * d * d, d - 0.5).mean())


def median_runtime_ms(forward: Callable[[], object], repeats: int, warmup: int) -> float:
    """Median wall time of ``forward`` in milliseconds."""
    for _ in range(warmup):
        forward()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        forward()
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1e3)


def train_estimator(model: Module, train: AttnMapDataset, cfg: ExperimentConfig, seed: int) -> None:
    opt = Adam(model.parameters(), lr=cfg.bench_lr)
    rng = np.random.default_rng([seed, 4])
    targets = train.thetas.astype(np.float32)
    model.train()
    for _ in range(cfg.bench_epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(order), cfg.bench_batch_size):
            idx = order[i : i + cfg.bench_batch_size]
            if len(idx) < 2:  # batch norm needs two samples
                continue
            model.zero_grad()
            F.smooth_l1(model(Tensor(train.maps[idx])), Tensor(targets[idx])).backward()
            opt.step()


def evaluate_estimator(name: str, preprocess: bool, model: Module, test: AttnMapDataset,
                       cfg: ExperimentConfig) -> MetricsRow:
    pred = predict_thetas(model, test.maps)
    iou = box_iou_batch(pred, test.boxes)
    model.eval()
    one = Tensor(test.maps[:1])

    def forward():
        with no_grad():
            model(one)

    runtime = median_runtime_ms(forward, cfg.bench_runtime_repeats, cfg.bench_runtime_warmup)
    model.train()
    return MetricsRow(
        architecture=name,
        preprocess=preprocess,
        parameters=model.num_parameters(),
        runtime_ms=runtime,
        sl1_error=smooth_l1_error(pred, test.thetas),
        iou_gt_08=float((iou > 0.8).mean()),
        iou_gt_095=float((iou > 0.95).mean()),
    )


def run_affnet_bench(
    cfg: ExperimentConfig,
    data: tuple[AttnMapDataset, AttnMapDataset] | None = None,
    out_dir: str | Path | None = None,
    architectures: tuple[str, ...] = ARCHITECTURES,
) -> list[MetricsRow]:
    """Train and score every architecture with and without pre-processing."""
    train, test = data if data is not None else gen_attention_dataset(cfg.attention)
    rows = []
    for k, name in enumerate(architectures):
        for preprocess in (False, True):
            rng = np.random.default_rng([cfg.seed, 5, k])
            model = build_estimator(name, cfg, preprocess, rng)
            t0 = time.perf_counter()
            train_estimator(model, train, cfg, cfg.seed)
            row = evaluate_estimator(name, preprocess, model, test, cfg)
            rows.append(row)
            log.info("%s prep=%s: sl1 %.5f iou>0.8 %.3f iou>0.95 %.3f %.3f ms (%.0fs)", name, preprocess,
                     row.sl1_error, row.iou_gt_08, row.iou_gt_095, row.runtime_ms, time.perf_counter() - t0)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "table1.csv", rows)
    return rows


def check_bench(rows: list[MetricsRow], min_iou: float = 0.90, speedup: float = 10.0) -> dict[str, bool]:
    """The expected pattern of the estimator comparison, one named check each."""
    by = {(r.architecture, r.preprocess): r for r in rows}
    names = sorted({r.architecture for r in rows})
    checks = {
        f"{n}: pre-processing improves IoU>0.8": by[(n, True)].iou_gt_08 > by[(n, False)].iou_gt_08 for n in names
    }
    best = by[("AffNet", True)]
    checks["AffNet+prep IoU>0.8 >= 0.90"] = best.iou_gt_08 >= min_iou
    checks["AffNet+prep lowest SL1"] = all(best.sl1_error <= r.sl1_error for r in rows)
    if ("ConvNet-L", True) in by:
        for prep in (False, True):
            checks[f"AffNet {speedup:g}x faster than ConvNet-L (prep={prep})"] = (
                by[("ConvNet-L", prep)].runtime_ms >= speedup * by[("AffNet", prep)].runtime_ms
            )
    return checks
