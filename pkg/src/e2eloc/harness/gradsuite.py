"""Finite-difference checks for every differentiable op and the full pipeline.

All checks run in float64 at random, kink-free points (thetas away from the
identity, continuous random inputs), so the central differences are valid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..localization import Preprocess, PreprocessConfig
from ..synthdata import GlyphDatasetConfig
from ..tensor_core import functional as F
from ..tensor_core.gradcheck import check_gradients, numerical_gradient, relative_error
from ..tensor_core.nn import BatchNorm1d, BatchNorm2d
from ..tensor_core.tensor import Tensor
from .config import ExperimentConfig
from .train import build_model, compute_targets, forward_losses


@dataclass
class GradRecord:
    seed: int
    case: str
    tensor: str
    error: float


Case = tuple[str, Callable[[], Tensor], dict[str, Tensor]]


def _t(rng: np.random.Generator, *shape, low: float | None = None, high: float | None = None) -> Tensor:
    if low is None:
        data = rng.standard_normal(shape)
    else:
        data = rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True)


def _theta(rng: np.random.Generator, b: int) -> Tensor:
    s = rng.uniform(0.3, 0.9, size=(b, 2)) * rng.choice([-1.0, 1.0], size=(b, 2), p=[0.2, 0.8])
    t = rng.uniform(-0.5, 0.5, size=(b, 2))
    return Tensor(np.concatenate([s, t], axis=1), requires_grad=True)


def _weighted(rng: np.random.Generator, out_fn: Callable[[], Tensor]) -> Callable[[], Tensor]:
    """Reduce an op's output to a scalar with fixed random weights."""
    probe = out_fn().data
    w = Tensor(rng.standard_normal(probe.shape))
    return lambda: F.sum(F.mul(out_fn(), w))


def op_cases(rng: np.random.Generator) -> list[Case]:
    cases: list[Case] = []

    def add(name, out_fn, tensors, scalar=False):
        cases.append((name, out_fn if scalar else _weighted(rng, out_fn), tensors))

    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    row = _t(rng, 1, 4)
    add("add", lambda: F.add(a, row), {"a": a, "b": row})
    add("sub", lambda: F.sub(a, b), {"a": a, "b": b})
    add("mul", lambda: F.mul(a, row), {"a": a, "b": row})
    pos = _t(rng, 3, 4, low=0.5, high=2.0)
    add("div", lambda: F.div(a, pos), {"a": a, "b": pos})
    add("neg", lambda: F.neg(a), {"x": a})
    add("square", lambda: F.square(a), {"x": a})
    add("sqrt", lambda: F.sqrt(pos), {"x": pos})
    add("exp", lambda: F.exp(a), {"x": a})
    add("log", lambda: F.log(pos), {"x": pos})
    add("abs", lambda: F.abs(a), {"x": a})
    add("relu", lambda: F.relu(a), {"x": a})
    add("sigmoid", lambda: F.sigmoid(a), {"x": a})
    x3 = _t(rng, 2, 3, 4)
    add("sum", lambda: F.sum(x3, axis=(0, 2), keepdims=True), {"x": x3})
    add("mean", lambda: F.mean(x3, axis=1), {"x": x3})
    add("amax", lambda: F.amax(x3, axis=(1, 2), keepdims=True), {"x": x3})
    add("amin", lambda: F.amin(x3, axis=2), {"x": x3})
    add("reshape", lambda: F.reshape(x3, (6, 4)), {"x": x3})
    add("transpose", lambda: F.transpose(x3, (2, 0, 1)), {"x": x3})
    add("getitem", lambda: F.getitem(x3, (slice(None), 1)), {"x": x3})
    add("take", lambda: F.take(x3, [2, 0, 2], axis=1), {"x": x3})
    c = _t(rng, 2, 2, 4)
    add("concatenate", lambda: F.concatenate([x3, c], axis=1), {"a": x3, "b": c})
    m1, m2 = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    add("matmul", lambda: F.matmul(m1, m2), {"a": m1, "b": m2})
    xl, wl, bl = _t(rng, 3, 4), _t(rng, 5, 4), _t(rng, 5)
    add("linear", lambda: F.linear(xl, wl, bl), {"x": xl, "w": wl, "b": bl})
    xc, wc, bc = _t(rng, 2, 2, 6, 6), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    add("conv2d", lambda: F.conv2d(xc, wc, bc, stride=1, padding=1), {"x": xc, "w": wc, "b": bc})
    add("conv2d_stride2", lambda: F.conv2d(xc, wc, bc, stride=2, padding=1), {"x": xc, "w": wc, "b": bc})
    add("max_pool2d", lambda: F.max_pool2d(xc, 2), {"x": xc})
    amap = _t(rng, 2, 1, 5, 7)
    add("directional_max_pool_vertical", lambda: F.directional_max_pool(amap, "vertical"), {"x": amap})
    add("directional_max_pool_horizontal", lambda: F.directional_max_pool(amap, "horizontal"), {"x": amap})
    add("channel_mean", lambda: F.channel_mean(xc), {"x": xc})
    add("global_avg_pool", lambda: F.global_avg_pool(xc), {"x": xc})
    img, th = _t(rng, 2, 2, 7, 9), _theta(rng, 2)
    add("bilinear_sample", lambda: F.bilinear_sample(img, th, 5, 6), {"image": img, "theta": th})
    add("resize_bilinear", lambda: F.resize_bilinear(img, 4, 5), {"x": img})
    target = Tensor(rng.standard_normal((3, 4)) * 1.5)
    add("smooth_l1", lambda: F.smooth_l1(a, target), {"pred": a}, scalar=True)
    labels = rng.integers(0, 4, size=3)
    add("softmax_cross_entropy", lambda: F.softmax_cross_entropy(a, labels), {"logits": a}, scalar=True)
    prep = Preprocess(PreprocessConfig(), dtype=np.float64)
    pm = _t(rng, 2, 1, 6, 6)
    add("preprocess", lambda: prep(pm), {"attention": pm, "w_tau": prep.w_tau})
    bn1 = BatchNorm1d(4, dtype=np.float64)
    bn1.track = False
    bn1.gamma.data[...] = rng.uniform(0.5, 1.5, 4)
    add("batch_norm1d", lambda: bn1(a), {"x": a, "gamma": bn1.gamma, "beta": bn1.beta})
    bn2 = BatchNorm2d(2, dtype=np.float64)
    bn2.track = False
    add("batch_norm2d", lambda: bn2(xc), {"x": xc, "gamma": bn2.gamma})
    return cases


def grad_scale_case(rng: np.random.Generator) -> float:
    """Relative error of grad_scale's backward against beta times the numeric gradient."""
    x = _t(rng, 3, 4)
    w = Tensor(rng.standard_normal((3, 4)))
    beta = float(rng.uniform(0.1, 2.0))
    x.grad = None
    F.sum(F.mul(F.square(F.grad_scale(x, beta)), w)).backward()
    numeric = numerical_gradient(lambda: F.sum(F.mul(F.square(x), w)), x)
    return relative_error(x.grad.reshape(-1), beta * numeric)


def run_op_checks(seeds, eps: float = 1e-6) -> list[GradRecord]:
    records = []
    for seed in seeds:
        rng = np.random.default_rng([seed, 100])
        for name, fn, tensors in op_cases(rng):
            for res in check_gradients(fn, tensors, eps=eps, rng=rng):
                records.append(GradRecord(seed, name, res.name, res.error))
        records.append(GradRecord(seed, "grad_scale", "x", grad_scale_case(rng)))
    return records


def tiny_config(seed: int) -> ExperimentConfig:
    """A model small enough for coordinate-wise finite differences."""
    return ExperimentConfig(
        seed=seed,
        attnet_widths=(2, 3),
        classifier_widths=(2, 3, 3),
        embedding_dim=4,
        hidden=6,
        pretrain_epochs=0,
        beta_att=1.0,
        beta_aff=1.0,
        glyph=GlyphDatasetConfig(num_classes=3, channels=1),
    )


def end_to_end_case(seed: int, batch: int = 3):
    """(loss_fn, tensors) for L(image, params) with targets and centres frozen.

    The AffNet output layers get small random weights so theta sits at a
    generic point rather than the identity, where sampling positions fall
    exactly on pixel centres and the crop is not differentiable.
    """
    cfg = tiny_config(seed)
    rng = np.random.default_rng([seed, 101])
    model = build_model(cfg, dtype=np.float64)
    aff = model.localizer.affnet
    for head in (aff.nn_h, aff.nn_v):
        head.out.weight.data[...] = rng.normal(0.0, 0.05, head.out.weight.shape)
        head.out.bias.data[...] = [rng.uniform(0.5, 0.9), rng.uniform(-0.2, 0.2)]
    size = cfg.glyph.image_size
    image = Tensor(rng.uniform(0.0, 1.0, size=(batch, 1, size, size)), requires_grad=True)
    labels = np.arange(batch) % cfg.glyph.num_classes
    targets = compute_targets(model, image)
    with_centers = forward_losses(model, image, labels, targets)
    model.centers.update(Tensor(with_centers.embedding.data + rng.normal(0, 0.3, with_centers.embedding.shape)), labels)

    def loss() -> Tensor:
        return forward_losses(model, image, labels, targets).total

    params = dict(model.named_parameters())
    tensors = {"image": image}
    for key in (
        "localizer.attnet.stem.weight",
        "localizer.attnet.head.weight",
        "localizer.affnet.prep.w_tau",
        "localizer.affnet.nn_h.hidden.weight",
        "localizer.affnet.nn_v.out.weight",
        "classifier.convs.0.weight",
        "classifier.convs.2.weight",
        "classifier.embed.weight",
        "classifier.fc.bias",
    ):
        tensors[key] = params[key]
    return loss, tensors


def run_end_to_end_checks(seeds, eps: float = 1e-6, max_coords: int = 12) -> list[GradRecord]:
    records = []
    for seed in seeds:
        loss, tensors = end_to_end_case(seed)
        rng = np.random.default_rng([seed, 102])
        for res in check_gradients(loss, tensors, eps=eps, max_coords=max_coords, rng=rng):
            records.append(GradRecord(seed, "end_to_end", res.name, res.error))
    return records
