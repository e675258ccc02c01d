"""Layer classes over the autodiff engine.

Layers own :class:`Param` objects and are callable on tensors; the graph is
taken from the input tensor. Construction is deterministic given the
supplied numpy Generator, which is what makes training runs repeatable.
"""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import Param, Tensor


class Module:
    """Base class: recursive parameter discovery in attribute order."""

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        out = []
        for key, val in self.__dict__.items():
            path = f"{prefix}{key}"
            if isinstance(val, Param):
                out.append((path, val))
            elif isinstance(val, Module):
                out.extend(val.named_params(path + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{path}.{i}."))
                    elif isinstance(item, Param):
                        out.append((f"{path}.{i}", item))
        return out

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()


class Dense(Module):
    """Affine map on the last axis of a 2-d input."""

    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, zero_init: bool = False):
        if zero_init:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal(size=(fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        self.w = Param(w)
        self.b = Param(np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        g = x.graph
        return engine.matmul(x, g.param(self.w)) + g.param(self.b)


class MLP(Module):
    """Dense stack with SiLU between layers (none after the last)."""

    def __init__(self, rng: np.random.Generator, dims: list[int], zero_last: bool = False):
        self.layers = [
            Dense(rng, dims[i], dims[i + 1], zero_init=(zero_last and i == len(dims) - 2))
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = engine.silu(x)
        return x


class Conv1d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0, zero_init: bool = False):
        if zero_init:
            w = np.zeros((cout, cin, k))
        else:
            w = rng.normal(size=(cout, cin, k)) * np.sqrt(2.0 / (cin * k))
        self.w = Param(w)
        self.b = Param(np.zeros(cout))
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        g = x.graph
        out = engine.conv1d(x, g.param(self.w), self.stride, self.pad)
        return out + engine.reshape(g.param(self.b), (1, -1, 1))


class ConvTranspose1d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 4, stride: int = 2, pad: int = 1):
        w = rng.normal(size=(cin, cout, k)) * np.sqrt(2.0 / (cin * k))
        self.w = Param(w)
        self.b = Param(np.zeros(cout))
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        g = x.graph
        out = engine.conv_transpose1d(x, g.param(self.w), self.stride, self.pad)
        return out + engine.reshape(g.param(self.b), (1, -1, 1))


class Conv3d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1, pad: int = 1):
        w = rng.normal(size=(cout, cin, k, k, k)) * np.sqrt(2.0 / (cin * k**3))
        self.w = Param(w)
        self.b = Param(np.zeros(cout))
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        g = x.graph
        out = engine.conv3d(x, g.param(self.w), self.stride, self.pad)
        return out + engine.reshape(g.param(self.b), (1, -1, 1, 1, 1))


class GroupNorm(Module):
    """Group normalization over channels of (N, C, *spatial) tensors."""

    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        if channels % groups != 0:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.gamma = Param(np.ones(channels))
        self.beta = Param(np.zeros(channels))
        self.groups, self.eps = groups, eps

    def __call__(self, x: Tensor) -> Tensor:
        g = x.graph
        shape = x.value.shape
        n, c = shape[0], shape[1]
        grouped = engine.reshape(x, (n, self.groups, -1))
        m = engine.mean(grouped, axis=2, keepdims=True)
        centered = grouped - m
        var = engine.mean(engine.square(centered), axis=2, keepdims=True)
        normed = centered / engine.sqrt(var + self.eps)
        out = engine.reshape(normed, shape)
        pshape = (1, c) + (1,) * (len(shape) - 2)
        return out * engine.reshape(g.param(self.gamma), pshape) + engine.reshape(g.param(self.beta), pshape)
