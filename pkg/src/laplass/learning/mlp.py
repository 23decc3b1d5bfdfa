"""Small fully connected networks with hand-written reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ACTIVATIONS = ("tanh", "linear")


@dataclass
class Mlp:
    """Affine layers y = act(x W + b); ``weights[i]`` has shape (in, out)."""

    weights: list
    biases: list
    activations: tuple

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ValueError("need one weight, bias and activation per layer")
        self.weights = [np.array(w, dtype=float) for w in self.weights]
        self.biases = [np.array(b, dtype=float) for b in self.biases]
        self.activations = tuple(self.activations)
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight/bias shapes do not match")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: input width does not chain")
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list:
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...); views, not copies."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activations)


def init_mlp(widths: Sequence[int], rng: np.random.Generator, hidden: str = "tanh") -> Mlp:
    """Glorot-uniform weights, zero biases, ``hidden`` activations and a linear output layer."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError("need at least input and output widths, all positive")
    weights, biases, acts = [], [], []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        limit = np.sqrt(6.0 / (a + b))
        weights.append(rng.uniform(-limit, limit, size=(a, b)))
        biases.append(np.zeros(b))
        acts.append("linear" if i == len(widths) - 2 else hidden)
    return Mlp(weights, biases, tuple(acts))


def linear_mlp(weight, bias) -> Mlp:
    """Single affine layer, handy for identity or planted-model networks."""
    weight = np.atleast_2d(np.asarray(weight, dtype=float))
    return Mlp([weight], [np.asarray(bias, dtype=float)], ("linear",))


def forward(net: Mlp, x: np.ndarray):
    """Output for a (B, in) batch plus the per-layer activations needed by ``backward``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"expected (batch, {net.input_dim}) input, got {x.shape}")
    acts = [x]
    h = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        h = h @ w + b
        if act == "tanh":
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def apply(net: Mlp, x: np.ndarray) -> np.ndarray:
    return forward(net, x)[0]


def backward(net: Mlp, acts: list, grad_out: np.ndarray):
    """Gradients (param list aligned with ``net.params()``, grad wrt input)."""
    grads = [None] * (2 * len(net.weights))
    g = grad_out
    for i in range(len(net.weights) - 1, -1, -1):
        if net.activations[i] == "tanh":
            g = g * (1.0 - acts[i + 1] ** 2)
        grads[2 * i] = acts[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return grads, g
