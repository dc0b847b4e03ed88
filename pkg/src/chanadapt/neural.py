"""Minimal dense feed-forward networks with exact analytic gradients.

Supports the four activations used by the encoder, decoder and the
mixture-density trunk/heads: linear, relu, elu_plus_one (ELU(x)+1+eps,
strictly positive) and softmax. Two optimizers are provided: Adam and
SGD with Nesterov momentum (with an exponential learning-rate schedule
helper). All math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend

ACTIVATIONS = ("linear", "relu", "elu_plus_one", "softmax")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=float)
        self.biases = np.ascontiguousarray(self.biases, dtype=float)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ValueError("weights must be (out, in) with matching biases")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def to_dict(self) -> dict:
        return {
            "activation": self.activation,
            "weights": self.weights.tolist(),
            "biases": self.biases.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DenseLayer":
        return cls(np.array(data["weights"]), np.array(data["biases"]), data["activation"])


class FeedForwardNet:
    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ValueError("need at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError("adjacent layer dimensions do not chain")
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        """Flat list [W0, b0, W1, b1, ...]; views, not copies."""
        params = []
        for layer in self.layers:
            params.append(layer.weights)
            params.append(layer.biases)
        return params

    def copy(self) -> "FeedForwardNet":
        return FeedForwardNet(
            [DenseLayer(l.weights.copy(), l.biases.copy(), l.activation) for l in self.layers]
        )

    def to_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, data: dict) -> "FeedForwardNet":
        return cls([DenseLayer.from_dict(l) for l in data["layers"]])


def glorot_init(sizes: list[int], activations: list[str],
                rng: np.random.Generator) -> FeedForwardNet:
    """Uniform Glorot initialization, zero biases, explicit seed via rng."""
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes, sizes[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(DenseLayer(W, np.zeros(fan_out), act))
    return FeedForwardNet(layers)


def forward(net: FeedForwardNet, x):
    """Single-vector forward pass. Returns (output, cache) for backward."""
    x = np.asarray(x, dtype=float)
    Y, cache = forward_batch(net, x[None, :])
    return Y[0], cache


def forward_batch(net: FeedForwardNet, X):
    """Batched forward pass over rows of X (N, in_dim)."""
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise ValueError(f"input must be (N, {net.in_dim})")
    cache = []
    cur = X
    for layer in net.layers:
        act = backend.ACTIVATION_CODES[layer.activation]
        out, pre = backend.dense_forward(cur, layer.weights, layer.biases, act)
        cache.append((cur, pre, out))
        cur = out
    return cur, cache


def backward(net: FeedForwardNet, cache, output_gradient):
    """Exact gradients of the composed map.

    Returns (grads, input_gradient) where grads matches net.parameters()
    layout ([dW0, db0, dW1, db1, ...]). output_gradient may be a single
    vector (matching forward) or a batch (matching forward_batch).
    """
    dY = np.ascontiguousarray(output_gradient, dtype=float)
    squeeze = dY.ndim == 1
    if squeeze:
        dY = dY[None, :]
    if dY.shape[0] != cache[-1][2].shape[0] or dY.shape[1] != net.out_dim:
        raise ValueError("output gradient shape does not match the forward cache")
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))
    for li in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[li]
        X, pre, out = cache[li]
        act = backend.ACTIVATION_CODES[layer.activation]
        dY, dW, db = backend.dense_backward(dY, X, layer.weights, pre, out, act)
        grads[2 * li] = dW
        grads[2 * li + 1] = db
    dX = dY[0] if squeeze else dY
    return grads, dX


class AdamState:
    """Adam optimizer state (first/second moment buffers, step counter)."""

    def __init__(self, params: list[np.ndarray], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


class NesterovState:
    """SGD with Nesterov momentum; lr may be rescheduled between epochs."""

    def __init__(self, params: list[np.ndarray], lr: float = 0.1, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]


def optimizer_step(state, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """Apply one update in place; deterministic given state and grads."""
    if len(params) != len(grads):
        raise ValueError("params and grads length mismatch")
    if isinstance(state, AdamState):
        if len(state.m) != len(params):
            raise ValueError("optimizer state does not match params")
        state.t += 1
        for p, g, m, v in zip(params, grads, state.m, state.v):
            backend.adam_step(p.ravel(), np.ascontiguousarray(g, dtype=float).ravel(),
                              m.ravel(), v.ravel(), state.t,
                              state.lr, state.beta1, state.beta2, state.eps)
    elif isinstance(state, NesterovState):
        if len(state.velocity) != len(params):
            raise ValueError("optimizer state does not match params")
        for p, g, vel in zip(params, grads, state.velocity):
            backend.nesterov_step(p.ravel(), np.ascontiguousarray(g, dtype=float).ravel(),
                                  vel.ravel(), state.lr, state.momentum)
    else:
        raise TypeError(f"unknown optimizer state {type(state)!r}")


def exponential_lr(lr_start: float, lr_end: float, epochs: int):
    """Geometric schedule with lr(0) = lr_start and lr(epochs) = lr_end."""
    if epochs <= 0:
        return lambda epoch: lr_start
    ratio = lr_end / lr_start

    def schedule(epoch: int) -> float:
        return lr_start * ratio ** (epoch / epochs)

    return schedule
