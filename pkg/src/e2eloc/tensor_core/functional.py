"""Differentiable operations.

Every function takes :class:`Tensor` (or scalars/arrays where noted) and
returns a new :class:`Tensor`. Backward closures return one gradient per
input, or ``None`` for inputs that carry no gradient.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor

# ---------------------------------------------------------------------------
# helpers


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = as_tensor(b)
    return _lift(a, b), b


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return Tensor._make(-x.data, (x,), lambda g: (-g,), "neg")


def square(x: Tensor) -> Tensor:
    return Tensor._make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    """Square root whose gradient at 0 is taken as 0 (subgradient)."""
    out = np.sqrt(x.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0).astype(x.dtype),)

    return Tensor._make(out, (x,), backward, "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, 0)
    return Tensor._make(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def grad_scale(x: Tensor, beta: float) -> Tensor:
    """Identity in the forward pass; multiplies the incoming gradient by ``beta``.

    ``beta == 0`` cuts the path entirely: nothing is propagated to ``x``.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    beta = float(beta)

    def backward(g):
        if beta == 0.0:
            return (None,)
        if beta == 1.0:
            return (g,)
        return (g * np.asarray(beta, dtype=g.dtype),)

    return Tensor._make(x.data, (x,), backward, "grad_scale")


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)
    axes = _normalize_axis(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return Tensor._make(np.asarray(out, dtype=x.dtype), (x,), backward, "mean")


def _arg_extreme(x: Tensor, axis, keepdims: bool, find_max: bool) -> Tensor:
    axes = _normalize_axis(axis, x.ndim)
    keep = tuple(a for a in range(x.ndim) if a not in axes)
    # move reduced axes last and flatten them; argmax/argmin pick the first
    # occurrence, i.e. the lowest linear index inside the reduced block
    perm = keep + axes
    moved = np.transpose(x.data, perm)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1) if find_max else flat.argmin(axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out_shape = tuple(1 if a in axes else n for a, n in enumerate(x.shape)) if keepdims else lead
    out = vals.reshape(out_shape)

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g.reshape(lead)[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(perm)),)

    return Tensor._make(out, (x,), backward, "max" if find_max else "min")


def amax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; gradient goes to the lowest-index maximiser."""
    return _arg_extreme(x, axis, keepdims, True)


def amin(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Min reduction; gradient goes to the lowest-index minimiser."""
    return _arg_extreme(x, axis, keepdims, False)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return Tensor._make(np.array(out, copy=True), (x,), backward, "getitem")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, indices, np.moveaxis(g, axis, 0))
        return (gx,)

    return Tensor._make(out, (x,), backward, "take")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product of operands with at least two dims; leading dims broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least two dimensions")

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor._make(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B, C, kh, kw, Ho, Wo) patch tensor."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, weight (out, in, kh, kw)."""
    b, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(b, c * kh * kw, ho * wo)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols)  # (B, O, Ho*Wo)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(b, o, ho, wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(b, o, ho * wo)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape(b, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    return Tensor._make(out, parents, backward, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` max pooling (H, W divisible by size)."""
    b, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"max_pool2d: spatial size {h}x{w} not divisible by {size}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(b, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (gx,)

    return Tensor._make(out, (x,), backward, "max_pool2d")


def directional_max_pool(x: Tensor, axis: str) -> Tensor:
    """Collapse a (B, 1, I, J) map to a profile vector.

    ``axis="vertical"`` pools with an I x 1 kernel (max down each column) and
    returns (B, J); ``axis="horizontal"`` pools with a 1 x J kernel (max along
    each row) and returns (B, I). Gradient goes to the first maximiser.
    """
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"directional_max_pool expects (B, 1, I, J), got {x.shape}")
    flat = reshape(x, (x.shape[0], x.shape[2], x.shape[3]))
    if axis == "vertical":
        return amax(flat, axis=1)
    if axis == "horizontal":
        return amax(flat, axis=2)
    raise ValueError(f"axis must be 'vertical' or 'horizontal', got {axis!r}")


def channel_mean(x: Tensor) -> Tensor:
    return mean(x, axis=1, keepdims=True)


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# resampling


def _axis_weights(pos: np.ndarray, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Bilinear interpolation matrix along one axis.

    ``pos`` holds source pixel coordinates, shape (B, n_out). Returns the
    (B, n_out, n_in) weight matrix plus floor indices and validity masks
    needed for the coordinate gradient.
    """
    i0 = np.floor(pos)
    frac = pos - i0
    i0 = i0.astype(np.int64)
    i1 = i0 + 1
    ok0 = (i0 >= 0) & (i0 < n_in)
    ok1 = (i1 >= 0) & (i1 < n_in)
    bsz, n_out = pos.shape
    mat = np.zeros((bsz, n_out, n_in), dtype=pos.dtype)
    bi, oi = np.nonzero(ok0)
    mat[bi, oi, i0[ok0]] += 1.0 - frac[ok0]
    bi, oi = np.nonzero(ok1)
    mat[bi, oi, i1[ok1]] += frac[ok1]
    return mat, i0, ok0, ok1


def _source_coords(scale: np.ndarray, shift: np.ndarray, n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-space source coordinates and d(coord)/d(scale) for one axis.

    Normalised output coordinate of pixel u is (2u + 1 - n_out) / n_out; the
    source normalised coordinate is ``scale * that + shift`` and maps to pixel
    ((x + 1) * n_in - 1) / 2. Written so that scale=1, shift=0 and
    n_out == n_in give exact integers.
    """
    centered = (2.0 * np.arange(n_out) + 1.0 - n_out).astype(scale.dtype)
    dscale = centered * n_in / n_out
    pos = (scale[:, None] * dscale[None, :] + (shift[:, None] * n_in + (n_in - 1))) / 2.0
    return pos, dscale / 2.0


def bilinear_sample(image: Tensor, theta: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable crop of ``image`` (B, C, H, W) by ``theta`` (B, 4).

    ``theta`` rows are [s_x, s_y, t_x, t_y]; output pixel at normalised
    (x, y) reads the source at (s_x * x + t_x, s_y * y + t_y). Both axes span
    [-1, 1] over pixel edges; samples outside the image read zero.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    b, c, h, w = image.shape
    if theta.shape != (b, 4):
        raise ValueError(f"theta must be ({b}, 4), got {theta.shape}")
    th = theta.data.astype(image.dtype, copy=False)
    px, dpx_ds = _source_coords(th[:, 0], th[:, 2], out_w, w)
    py, dpy_ds = _source_coords(th[:, 1], th[:, 3], out_h, h)
    rx, ix0, okx0, okx1 = _axis_weights(px, w)
    ry, iy0, oky0, oky1 = _axis_weights(py, h)
    # separable: out[b, c] = Ry[b] @ img[b, c] @ Rx[b].T
    tmp = np.matmul(image.data, rx.transpose(0, 2, 1)[:, None])  # (B, C, H, out_w)
    out = np.matmul(ry[:, None], tmp)  # (B, C, out_h, out_w)

    def backward(g):
        gimg = gtheta = None
        if image.requires_grad:
            gimg = np.matmul(np.matmul(ry.transpose(0, 2, 1)[:, None], g), rx[:, None])
        if theta.requires_grad:
            # dL/dRy[b, v, :] = sum_c g[b, c, v, :] @ tmp[b, c].T
            dry = np.einsum("bcvu,bchu->bvh", g, tmp)
            rows = np.matmul(ry[:, None], image.data)  # (B, C, out_h, W)
            drx = np.einsum("bcvu,bcvw->buw", g, rows)
            gpy = _coord_grad(dry, iy0, oky0, oky1)
            gpx = _coord_grad(drx, ix0, okx0, okx1)
            gtheta = np.stack(
                [
                    (gpx * dpx_ds[None, :]).sum(axis=1),
                    (gpy * dpy_ds[None, :]).sum(axis=1),
                    gpx.sum(axis=1) * (w / 2.0),
                    gpy.sum(axis=1) * (h / 2.0),
                ],
                axis=1,
            ).astype(theta.dtype)
        return gimg, gtheta

    return Tensor._make(out, (image, theta), backward, "bilinear_sample")


def _coord_grad(dmat: np.ndarray, i0: np.ndarray, ok0: np.ndarray, ok1: np.ndarray) -> np.ndarray:
    # weight at i0 is (1 - frac) and at i0 + 1 is frac, so d/dpos = -1 and +1
    n_in = dmat.shape[2]
    lo = np.take_along_axis(dmat, np.clip(i0, 0, n_in - 1)[..., None], axis=2)[..., 0]
    hi = np.take_along_axis(dmat, np.clip(i0 + 1, 0, n_in - 1)[..., None], axis=2)[..., 0]
    return np.where(ok1, hi, 0.0) - np.where(ok0, lo, 0.0)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize (pixel-centre aligned); identity when sizes match."""
    if x.shape[2:] == (out_h, out_w):
        return x
    theta = Tensor(np.tile(np.array([1.0, 1.0, 0.0, 0.0], dtype=x.dtype), (x.shape[0], 1)))
    return bilinear_sample(x, theta, out_h, out_w)


def resize_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[2:]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    out = x.data[:, :, rows][:, :, :, cols]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
        return (gx,)

    return Tensor._make(out, (x,), backward, "resize_nearest")


# ---------------------------------------------------------------------------
# losses


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Mean elementwise smooth L1; ``target`` never receives a gradient."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1: shape mismatch {pred.shape} vs {target.shape}")
    d = pred.data - target
    ad = np.abs(d)
    small = ad < 1.0
    loss = np.where(small, 0.5 * d * d, ad - 0.5).mean()
    n = d.size

    def backward(g):
        return (g * np.where(small, d, np.sign(d)) / n,)

    return Tensor._make(np.asarray(loss, dtype=pred.dtype), (pred,), backward, "smooth_l1")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels must have shape ({b},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / b,)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def log_softmax(logits: Tensor) -> np.ndarray:
    """Non-differentiable helper: row-wise log-softmax of the values."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
