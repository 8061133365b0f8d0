"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numerical_gradient(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    eps: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """d fn() / d tensor by central differences at the flat ``indices``.

    ``fn`` must rebuild its output from ``tensor.data`` on every call.
    Returns a vector aligned with ``indices`` (all entries when None).
    """
    flat = tensor.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(fn().data)
            flat[i] = orig - eps
            minus = float(fn().data)
            flat[i] = orig
            out.append((plus - minus) / (2.0 * eps))
    return np.array(out)


@dataclass
class GradCheckResult:
    name: str
    error: float
    checked: int


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: dict[str, Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[GradCheckResult]:
    """Compare backprop against central differences for each named tensor.

    With ``max_coords`` set, a random subset of that many coordinates per
    tensor is checked.
    """
    for t in tensors.values():
        t.grad = None
    fn().backward()
    rng = rng or np.random.default_rng(0)
    results = []
    for name, t in tensors.items():
        analytic = np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1)
        if max_coords is not None and t.data.size > max_coords:
            idx = np.sort(rng.choice(t.data.size, size=max_coords, replace=False))
        else:
            idx = np.arange(t.data.size)
        numeric = numerical_gradient(fn, t, eps=eps, indices=idx)
        results.append(GradCheckResult(name, relative_error(analytic[idx], numeric), len(idx)))
    return results
