"""Parameter containers: named parameters, modules and the small layers the
models are assembled from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A trainable tensor. ``name`` is filled in by the owning model so it can
    be addressed in checkpoints (e.g. ``det.arm.reduce.weight``)."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Non-trainable state that must survive a checkpoint round trip."""
        for key in getattr(self, "_buffers", ()):
            yield f"{prefix}{key}", getattr(self, key)
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, zero: bool = False):
        if k % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {k}")
        fan_in = cin * k * k
        shape = (cout, cin, k, k)
        self.weight = Parameter(np.zeros(shape) if zero else _uniform(rng, shape, fan_in))
        self.bias = Parameter(np.zeros(cout) if zero else _uniform(rng, cout, fan_in))
        self.stride = stride
        self.padding = (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, padding=self.padding, stride=self.stride)


class Linear(Module):
    """Fully connected layer; weight stored as [in, out]."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        self.weight = Parameter(np.zeros((n_in, n_out)) if zero else _uniform(rng, (n_in, n_out), n_in))
        self.bias = Parameter(np.zeros(n_out) if zero else _uniform(rng, n_out, n_in))

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, n: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(n))
        self.bias = Parameter(np.zeros(n))
        self.eps = eps

    def __call__(self, x: Tensor, axis: int = -1) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, axis=axis, eps=self.eps)


class BatchNorm1d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, n: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Parameter(np.ones(n))
        self.bias = Parameter(np.zeros(n))
        self.running_mean = np.zeros(n, dtype=get_default_dtype())
        self.running_var = np.ones(n, dtype=get_default_dtype())
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm_1d(x, self.weight, self.bias, self.running_mean, self.running_var,
                               self.training, self.momentum, self.eps)
