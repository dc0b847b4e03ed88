"""Mixture density network channel model.

A small ReLU trunk maps a symbol z to three heads predicting the
per-component means, variances (through ELU(x)+1+eps, so they stay
positive) and prior logits of a diagonal Gaussian mixture over the
channel output. Training minimizes the negative conditional
log-likelihood of observed (z, x) pairs. Sampling comes in two flavors:
exact (categorical component draw) and a smooth Gumbel-softmax surrogate
used when gradients must flow through the channel.
"""

from __future__ import annotations

import numpy as np

from . import backend, gmm, neural

GUMBEL_CLIP = 1e-12
DEFAULT_TAU = 0.01


class MdnModel:
    """Trunk + (means, variances, prior logits) heads."""

    def __init__(self, trunk: neural.FeedForwardNet, head_mean: neural.DenseLayer,
                 head_var: neural.DenseLayer, head_logit: neural.DenseLayer,
                 k: int, d: int):
        n_h = trunk.out_dim
        if trunk.in_dim != d:
            raise ValueError("trunk input must be the symbol dimension")
        if head_mean.weights.shape != (k * d, n_h):
            raise ValueError("mean head must be (k*d, n_h)")
        if head_var.weights.shape != (k * d, n_h):
            raise ValueError("variance head must be (k*d, n_h)")
        if head_logit.weights.shape != (k, n_h):
            raise ValueError("logit head must be (k, n_h)")
        if head_var.activation != "elu_plus_one":
            raise ValueError("variance head must use elu_plus_one")
        self.trunk = trunk
        self.head_mean = head_mean
        self.head_var = head_var
        self.head_logit = head_logit
        self.k = k
        self.d = d
        self.n_h = n_h

    @classmethod
    def create(cls, d: int, k: int, n_h: int, rng: np.random.Generator) -> "MdnModel":
        trunk = neural.glorot_init([d, n_h, n_h], ["relu", "relu"], rng)
        heads = neural.glorot_init([n_h, k * d], ["linear"], rng).layers[0]
        head_var = neural.glorot_init([n_h, k * d], ["elu_plus_one"], rng).layers[0]
        head_logit = neural.glorot_init([n_h, k], ["linear"], rng).layers[0]
        return cls(trunk, heads, head_var, head_logit, k, d)

    def parameters(self) -> list[np.ndarray]:
        params = self.trunk.parameters()
        for head in (self.head_mean, self.head_var, self.head_logit):
            params.append(head.weights)
            params.append(head.biases)
        return params

    def head_parameters(self) -> list[np.ndarray]:
        params = []
        for head in (self.head_mean, self.head_var, self.head_logit):
            params.append(head.weights)
            params.append(head.biases)
        return params

    def copy(self) -> "MdnModel":
        clone = lambda l: neural.DenseLayer(l.weights.copy(), l.biases.copy(), l.activation)
        return MdnModel(self.trunk.copy(), clone(self.head_mean), clone(self.head_var),
                        clone(self.head_logit), self.k, self.d)

    def predict_arrays(self, Z):
        """Mixture parameters for each row of Z (S, d).

        Returns (means (S, k, d), variances (S, k, d), logits (S, k), cache).
        """
        Z = np.ascontiguousarray(Z, dtype=float)
        hidden, trunk_cache = neural.forward_batch(self.trunk, Z)
        caches = {"trunk": trunk_cache, "hidden": hidden}
        outs = {}
        for name, head in (("mean", self.head_mean), ("var", self.head_var),
                           ("logit", self.head_logit)):
            act = backend.ACTIVATION_CODES[head.activation]
            out, pre = backend.dense_forward(hidden, head.weights, head.biases, act)
            outs[name] = out
            caches[name] = pre
        s = Z.shape[0]
        means = outs["mean"].reshape(s, self.k, self.d)
        variances = outs["var"].reshape(s, self.k, self.d)
        logits = outs["logit"]
        return means, variances, logits, caches

    def predict_params(self, z) -> list[gmm.GaussianComponent]:
        """The k mixture components the model predicts at symbol z."""
        z = np.asarray(z, dtype=float)
        means, variances, logits, _ = self.predict_arrays(z[None, :])
        return [
            gmm.GaussianComponent(logits[0, i], means[0, i], variances[0, i])
            for i in range(self.k)
        ]

    def conditional_mixture(self, symbols) -> gmm.ConditionalMixture:
        """Stack predictions at all constellation points into one mixture."""
        means, variances, logits, _ = self.predict_arrays(symbols)
        return gmm.ConditionalMixture(logits, means, variances=variances)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "d": self.d,
            "n_h": self.n_h,
            "trunk": self.trunk.to_dict(),
            "head_mean": self.head_mean.to_dict(),
            "head_var": self.head_var.to_dict(),
            "head_logit": self.head_logit.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MdnModel":
        return cls(
            neural.FeedForwardNet.from_dict(data["trunk"]),
            neural.DenseLayer.from_dict(data["head_mean"]),
            neural.DenseLayer.from_dict(data["head_var"]),
            neural.DenseLayer.from_dict(data["head_logit"]),
            data["k"],
            data["d"],
        )


def _head_backward(model: MdnModel, caches, dmeans, dvariances, dlogits):
    """Backprop head gradients into (head grads, trunk-output gradient)."""
    hidden = caches["hidden"]
    s = hidden.shape[0]
    grads = []
    dhidden = None
    for name, head, dout in (("mean", model.head_mean, dmeans.reshape(s, -1)),
                             ("var", model.head_var, dvariances.reshape(s, -1)),
                             ("logit", model.head_logit, dlogits)):
        act = backend.ACTIVATION_CODES[head.activation]
        dx, dw, db = backend.dense_backward(
            np.ascontiguousarray(dout), hidden, head.weights, caches[name], None, act
        )
        grads.append(dw)
        grads.append(db)
        dhidden = dx if dhidden is None else dhidden + dx
    return grads, dhidden


def cll_loss_and_grad(model: MdnModel, Z, X):
    """Mean negative conditional log-likelihood and exact parameter gradients.

    Z (N, d) are channel inputs, X (N, d) the observed outputs. Returns
    (loss, grads) with grads matching model.parameters() layout.
    """
    Z = np.asarray(Z, dtype=float)
    symbols, idx = np.unique(Z, axis=0, return_inverse=True)
    return cll_loss_and_grad_indexed(model, symbols, idx.ravel(), X)


def cll_loss_and_grad_indexed(model: MdnModel, symbols, idx, X):
    """Same as cll_loss_and_grad for pre-deduplicated symbols.

    symbols (S, d) are the distinct channel inputs and idx (N,) maps each
    sample to its row; exploiting this keeps the trunk batch small.
    """
    X = np.ascontiguousarray(X, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    means, variances, logits, caches = model.predict_arrays(symbols)
    loss, dmu, dvar, dlog = backend.gmm_diag_nll_grad(X, idx, means, variances, logits)
    head_grads, dhidden = _head_backward(model, caches, dmu, dvar, dlog)
    trunk_grads, _ = neural.backward(model.trunk, caches["trunk"], dhidden)
    return loss, trunk_grads + head_grads


def conditional_log_likelihood(model: MdnModel, Z, X) -> np.ndarray:
    """Per-sample log P(x | z), shape (N,)."""
    Z = np.asarray(Z, dtype=float)
    symbols, idx = np.unique(Z, axis=0, return_inverse=True)
    means, variances, logits, _ = model.predict_arrays(symbols)
    return backend.gmm_diag_logpdf(np.ascontiguousarray(X, dtype=float),
                                   idx.ravel().astype(np.int64), means, variances, logits)


def train_mdn(model: MdnModel, Z, X, epochs: int = 100, lr: float = 0.001,
              batch_size: int = 128, rng: np.random.Generator | None = None,
              head_only: bool = False) -> list[float]:
    """Adam training on (z, x) pairs; returns the per-epoch mean loss trace.

    The model is updated in place. head_only restricts updates to the
    three output heads (the trunk stays frozen).
    """
    Z = np.asarray(Z, dtype=float)
    X = np.asarray(X, dtype=float)
    if Z.shape[0] == 0:
        raise ValueError("empty dataset")
    if rng is None:
        rng = np.random.default_rng(0)
    symbols, idx = np.unique(Z, axis=0, return_inverse=True)
    idx = idx.ravel().astype(np.int64)
    params = model.head_parameters() if head_only else model.parameters()
    n_trunk = len(model.trunk.parameters())
    state = neural.AdamState(params, lr=lr)
    n = X.shape[0]
    trace = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            loss, grads = cll_loss_and_grad_indexed(model, symbols, idx[sel], X[sel])
            if head_only:
                grads = grads[n_trunk:]
            neural.optimizer_step(state, params, grads)
            total += loss * sel.shape[0]
        trace.append(total / n)
    return trace


def sample_channel(model: MdnModel, z, rng: np.random.Generator) -> np.ndarray:
    """Draw one channel output x ~ P(. | z) by exact mixture sampling."""
    x, _ = gmm.sample_mixture(model.predict_params(z), rng)
    return x


def sample_channel_batch(model: MdnModel, symbols, idx, rng: np.random.Generator) -> np.ndarray:
    """Vectorized exact sampling for symbol indices into a symbol table."""
    mixture = model.conditional_mixture(symbols)
    X, _ = gmm.sample_conditional(mixture, idx, rng)
    return X


def gumbel_noise(rng: np.random.Generator, size) -> np.ndarray:
    """Standard Gumbel draws via -log(-log(U)), U clamped away from {0, 1}."""
    u = np.clip(rng.random(size), GUMBEL_CLIP, 1.0 - GUMBEL_CLIP)
    return -np.log(-np.log(u))


def differentiable_transfer(means, variances, logits, gumbel, u, tau: float = DEFAULT_TAU):
    """Smooth channel transfer: x = sum_i w_i (sqrt(var_i) * u + mu_i).

    w is the temperature-scaled softmax of (gumbel + logits) / tau, a
    differentiable surrogate for drawing the component index. Batched:
    means/variances (N, k, d), logits/gumbel (N, k), u (N, d).
    Returns (x, cache) with cache for the backward pass.
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    scaled = (gumbel + logits) / tau
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=-1, keepdims=True)  # (N, k)
    s = np.sqrt(variances)
    v = s * u[:, None, :] + means  # (N, k, d)
    x = np.einsum("nk,nkd->nd", w, v)
    return x, {"w": w, "s": s, "v": v, "u": u, "tau": tau}


def differentiable_transfer_backward(dx, cache):
    """Gradients of the smooth transfer w.r.t. means, variances, logits."""
    w, s, v, u, tau = cache["w"], cache["s"], cache["v"], cache["u"], cache["tau"]
    dmeans = w[:, :, None] * dx[:, None, :]
    ds = dmeans * u[:, None, :]
    dvariances = ds / (2.0 * s)
    dw = np.einsum("nkd,nd->nk", v, dx)
    dscaled = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
    dlogits = dscaled / tau
    return dmeans, dvariances, dlogits


def sample_channel_differentiable(model: MdnModel, z, gumbel, u,
                                  tau: float = DEFAULT_TAU) -> np.ndarray:
    """Smooth sampling at one symbol with externally supplied noise."""
    z = np.asarray(z, dtype=float)
    means, variances, logits, _ = model.predict_arrays(z[None, :])
    gumbel = np.asarray(gumbel, dtype=float)[None, :]
    u = np.asarray(u, dtype=float)[None, :]
    x, _ = differentiable_transfer(means, variances, logits, gumbel, u, tau)
    return x[0]
