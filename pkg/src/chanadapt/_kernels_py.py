"""NumPy reference implementations of the hot numerical kernels.

The compiled extension in ``_native.pyx`` implements the same functions with
identical semantics; ``backend.py`` picks one of the two at import time.
All arrays are float64 and C-contiguous.
"""

import numpy as np

LINEAR, RELU, ELU_PLUS_ONE, SOFTMAX = 0, 1, 2, 3

# keeps ELU(x) + 1 + eps strictly positive
ELU_EPS = 1e-6


def _activate(pre, act):
    if act == LINEAR:
        return pre
    if act == RELU:
        return np.maximum(pre, 0.0)
    if act == ELU_PLUS_ONE:
        return np.where(pre > 0.0, pre + 1.0 + ELU_EPS, np.exp(np.minimum(pre, 0.0)) + ELU_EPS)
    if act == SOFTMAX:
        shifted = pre - pre.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown activation code {act}")


def dense_forward(X, W, b, act):
    """Y = act(X @ W.T + b) for a batch X (N, in), W (out, in), b (out,).

    Returns (Y, pre) where pre is the pre-activation, kept for backward.
    """
    pre = X @ W.T + b
    return _activate(pre, act), pre


def dense_backward(dY, X, W, pre, Y, act):
    """Backward pass of dense_forward.

    Returns (dX, dW, db) given the upstream gradient dY (N, out).
    """
    if act == LINEAR:
        dpre = dY
    elif act == RELU:
        dpre = dY * (pre > 0.0)
    elif act == ELU_PLUS_ONE:
        dpre = dY * np.where(pre > 0.0, 1.0, np.exp(np.minimum(pre, 0.0)))
    elif act == SOFTMAX:
        dpre = Y * (dY - (dY * Y).sum(axis=-1, keepdims=True))
    else:
        raise ValueError(f"unknown activation code {act}")
    dW = dpre.T @ X
    db = dpre.sum(axis=0)
    dX = dpre @ W
    return dX, dW, db


def adam_step(p, g, m, v, t, lr, beta1, beta2, eps):
    """One in-place Adam update on flat arrays; t is the 1-based step index."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def nesterov_step(p, g, vel, lr, momentum):
    """One in-place Nesterov-momentum SGD update on flat arrays."""
    vel *= momentum
    vel += g
    p -= lr * (g + momentum * vel)


def _logsumexp(a):
    mx = a.max(axis=-1, keepdims=True)
    return mx + np.log(np.exp(a - mx).sum(axis=-1, keepdims=True))


def _lse_vec(a):
    mx = a.max(axis=-1)
    return mx + np.log(np.exp(a - mx[..., None]).sum(axis=-1))


def gmm_diag_logpdf(X, idx, means, variances, logits):
    """Per-sample log density under diagonal Gaussian mixtures.

    X (N, d) are samples; idx (N,) maps each sample to a row of the
    parameter arrays means/variances (S, k, d) and logits (S, k).
    """
    mu = means[idx]
    var = variances[idx]
    lg = logits[idx]
    diff = X[:, None, :] - mu
    quad = -0.5 * ((diff * diff) / var + np.log(var)).sum(axis=2)
    quad -= 0.5 * X.shape[1] * np.log(2.0 * np.pi)
    logw = lg - _logsumexp(lg)
    return _lse_vec(logw + quad)


def gmm_diag_nll_grad(X, idx, means, variances, logits):
    """Mean negative log-likelihood and its gradients.

    Gradients are w.r.t. the per-row parameter arrays, accumulated over the
    samples assigned to each row, and scaled for the mean over samples.
    Returns (nll, dmeans, dvariances, dlogits).
    """
    n = X.shape[0]
    mu = means[idx]
    var = variances[idx]
    lg = logits[idx]
    diff = X[:, None, :] - mu
    quad = -0.5 * ((diff * diff) / var + np.log(var)).sum(axis=2)
    quad -= 0.5 * X.shape[1] * np.log(2.0 * np.pi)
    logw = lg - _logsumexp(lg)
    comp = logw + quad
    lse = _lse_vec(comp)
    nll = -lse.mean()

    resp = np.exp(comp - lse[:, None])  # (N, k)
    w = np.exp(logw)
    scale = -1.0 / n
    dmu_n = scale * resp[:, :, None] * diff / var
    dvar_n = scale * resp[:, :, None] * 0.5 * ((diff * diff) / (var * var) - 1.0 / var)
    dlog_n = scale * (resp - w)

    s, k, d = means.shape
    onehot = np.zeros((s, n))
    onehot[idx, np.arange(n)] = 1.0
    dmeans = (onehot @ dmu_n.reshape(n, k * d)).reshape(s, k, d)
    dvariances = (onehot @ dvar_n.reshape(n, k * d)).reshape(s, k, d)
    dlogits = onehot @ dlog_n
    return nll, dmeans, dvariances, dlogits
