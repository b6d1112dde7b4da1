"""Small neural building blocks on top of the autodiff engine."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=shape if shape is not None else (fan_in, fan_out))


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, name: str = "linear"):
        self.weight = Parameter(glorot(rng, d_in, d_out), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Mlp:
    """Tanh MLP with linear output layer."""

    def __init__(
        self,
        rng: np.random.Generator,
        d_in: int,
        hidden: tuple[int, ...],
        d_out: int,
        name: str = "mlp",
    ):
        dims = [d_in, *hidden, d_out]
        self.layers = [
            Linear(rng, dims[i], dims[i + 1], name=f"{name}.{i}") for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        out = x
        for layer in self.layers[:-1]:
            out = ad.tanh(layer(out))
        return self.layers[-1](out)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class LayerNorm:
    """Normalization over the last axis with learned gain and shift."""

    def __init__(self, dim: int, eps: float = 1e-5, name: str = "ln"):
        self.gain = Parameter(np.ones(dim), name=f"{name}.gain")
        self.shift = Parameter(np.zeros(dim), name=f"{name}.shift")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = ad.tensor_mean(x, axis=-1, keepdims=True)
        centered = ad.sub(x, mu)
        var = ad.tensor_mean(ad.square(centered), axis=-1, keepdims=True)
        normed = ad.div(centered, ad.sqrt(ad.add(var, self.eps)))
        return ad.add(ad.mul(normed, self.gain), self.shift)

    def parameters(self) -> list[Parameter]:
        return [self.gain, self.shift]


class Embedding:
    def __init__(self, rng: np.random.Generator, count: int, dim: int, scale: float = 0.02, name: str = "emb"):
        self.table = Parameter(rng.normal(0.0, scale, size=(count, dim)), name=f"{name}.table")

    def __call__(self, ids) -> Tensor:
        return ad.take_rows(self.table, np.asarray(ids))

    def parameters(self) -> list[Parameter]:
        return [self.table]
