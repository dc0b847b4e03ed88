"""Shared test utilities: finite differences and small statistical oracles."""

import numpy as np


def fd_grad(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-3):
    """Worst-case relative disagreement, floored so near-zero entries
    are compared absolutely at floor scale."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def flatten_grads(grads):
    return np.concatenate([np.asarray(g, dtype=float).ravel() for g in grads])


def gaussian_pdf(x, mean, var):
    """Scalar Gaussian density, the brute-force oracle building block."""
    return np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def mvn_logpdf(x, mean, cov):
    d = len(mean)
    diff = np.asarray(x, dtype=float) - mean
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, diff.T if diff.ndim == 2 else diff)
    quad = (sol * sol).sum(axis=0)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (quad + logdet + d * np.log(2.0 * np.pi))
