"""A tiny feed-forward network with hand-written backprop.

Used for the domain discriminator, the distillation meta-nets, the frozen toy
teacher and the toy patch encoder. Inputs are row batches ``(n, in_dim)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "none")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Layer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "none"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).ravel()
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(
                f"bias {self.bias.shape} does not match weight {self.weight.shape}"
            )


@dataclass
class TinyNet:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")

    @classmethod
    def init(cls, dims, activations, rng: np.random.Generator, scale: float | None = None):
        """He-style random init; ``scale`` overrides the per-layer std."""
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for d_in, d_out, act in zip(dims[:-1], dims[1:], activations):
            std = scale if scale is not None else np.sqrt(2.0 / d_in)
            layers.append(Layer(rng.normal(0.0, std, (d_in, d_out)), np.zeros(d_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def num_parameters(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def forward(self, x):
        """Return ``(output, cache)``; the cache feeds :meth:`backward`."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim == 1:
            h = h[None, :]
        if h.shape[1] != self.in_dim:
            raise ValueError(f"input dim {h.shape[1]} does not match network ({self.in_dim})")
        cache = []
        for layer in self.layers:
            z = h @ layer.weight + layer.bias
            if layer.activation == "relu":
                a = np.maximum(z, 0.0)
            elif layer.activation == "sigmoid":
                a = sigmoid(z)
            else:
                a = z
            cache.append((h, z, a))
            h = a
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Backprop ``grad_out`` (d loss / d output); returns (layer grads, d loss / d input)."""
        g = np.asarray(grad_out, dtype=np.float64)
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            h, z, a = cache[i]
            if layer.activation == "relu":
                g = g * (z > 0)
            elif layer.activation == "sigmoid":
                g = g * a * (1.0 - a)
            grads[i] = (h.T @ g, g.sum(axis=0))
            g = g @ layer.weight.T
        return grads, g

    def parameters(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    def with_parameters(self, theta) -> "TinyNet":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.num_parameters:
            raise ValueError("parameter vector has the wrong length")
        layers, pos = [], 0
        for l in self.layers:
            nw, nb = l.weight.size, l.bias.size
            w = theta[pos:pos + nw].reshape(l.weight.shape)
            b = theta[pos + nw:pos + nw + nb]
            pos += nw + nb
            layers.append(Layer(w.copy(), b.copy(), l.activation))
        return TinyNet(layers)

    def apply_update(self, grads, lr: float) -> None:
        for layer, (gw, gb) in zip(self.layers, grads):
            layer.weight -= lr * gw
            layer.bias -= lr * gb

    def copy(self) -> "TinyNet":
        return TinyNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([gw.ravel(), gb.ravel()]) for gw, gb in grads])
