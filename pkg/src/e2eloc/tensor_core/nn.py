"""Parameter containers and the few layers the networks need."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always requires gradients."""

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


class Module:
    """Minimal module tree: attribute traversal for parameters and modes."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(prefix=full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, module in self._named_modules():
            for key, arr in module._buffers().items():
                state[f"{name}{key}"] = arr.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = state[name].astype(p.dtype, copy=True)
        for name, module in self._named_modules():
            for key in module._buffers():
                setattr(module, key, state[f"{name}{key}"].copy())

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value._named_modules(prefix=f"{prefix}{name}.")

    def _buffers(self) -> dict[str, np.ndarray]:
        return {}

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(_uniform(rng, (n_out, n_in), bound, dtype))
        self.bias = Parameter(_uniform(rng, (n_out,), bound, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        dtype=np.float32,
    ):
        fan_in = c_in * kernel * kernel
        # He-uniform, the layers feed ReLUs
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel, kernel), np.sqrt(6.0 / fan_in), dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ResidualBlock(Module):
    """conv-relu-conv plus identity skip, followed by relu."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.conv1 = Conv2d(channels, channels, 3, rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng, dtype=dtype)
        # start near identity so stacking the block does not blow up activations
        self.conv2.weight.data *= 0.1

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.conv1(x))
        return F.relu(F.add(x, self.conv2(h)))


class _BatchNorm(Module):
    """Batch normalisation over every axis except ``channel_axis``.

    Training mode normalises with batch statistics and updates running
    averages (unless ``track`` is switched off); eval mode uses the running
    averages.
    """

    reduce_axes: tuple[int, ...] = (0,)

    def __init__(self, n: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Parameter(np.ones(n, dtype=dtype))
        self.beta = Parameter(np.zeros(n, dtype=dtype))
        self.running_mean = np.zeros(n, dtype=dtype)
        self.running_var = np.ones(n, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.track = True

    def _buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def _shape(self, ndim: int) -> tuple[int, ...]:
        return tuple(-1 if a == 1 else 1 for a in range(ndim))

    def forward(self, x: Tensor) -> Tensor:
        shape = self._shape(x.ndim)
        if self.training:
            mu = F.mean(x, axis=self.reduce_axes, keepdims=True)
            centered = F.sub(x, mu)
            var = F.mean(F.square(centered), axis=self.reduce_axes, keepdims=True)
            if self.track:
                m = self.momentum
                self.running_mean = ((1 - m) * self.running_mean + m * mu.data.reshape(-1)).astype(self.running_mean.dtype)
                self.running_var = ((1 - m) * self.running_var + m * var.data.reshape(-1)).astype(self.running_var.dtype)
            xhat = F.div(centered, F.sqrt(F.add(var, self.eps)))
        else:
            mean = self.running_mean.reshape(shape)
            std = np.sqrt(self.running_var + self.eps).reshape(shape)
            xhat = F.div(F.sub(x, mean), std.astype(x.dtype))
        return F.add(F.mul(xhat, F.reshape(self.gamma, shape)), F.reshape(self.beta, shape))


class BatchNorm1d(_BatchNorm):
    """Normalises (B, N) features per column."""

    reduce_axes = (0,)

    def _shape(self, ndim: int) -> tuple[int, ...]:
        return (1, -1)


class BatchNorm2d(_BatchNorm):
    """Normalises (B, C, H, W) maps per channel."""

    reduce_axes = (0, 2, 3)
