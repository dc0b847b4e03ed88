"""Both kernel backends must agree bit-for-bit-ish on every operation."""

import numpy as np
import pytest

from chanadapt import _kernels_py as kpy
from chanadapt import backend

try:
    from chanadapt import _native as knat

    HAVE_NATIVE = True
except ImportError:
    HAVE_NATIVE = False

needs_native = pytest.mark.skipif(not HAVE_NATIVE, reason="compiled backend not built")


def test_selected_backend_reported():
    assert backend.BACKEND in ("native", "python")


@needs_native
@pytest.mark.parametrize("act", [0, 1, 2, 3])
def test_dense_forward_backward_agree(act):
    rng = np.random.default_rng(act)
    X = rng.normal(size=(37, 11))
    W = rng.normal(size=(5, 11))
    b = rng.normal(size=5)
    yp, pp = kpy.dense_forward(X, W, b, act)
    yn, pn = knat.dense_forward(X, W, b, act)
    assert np.allclose(yp, yn, atol=1e-13)
    assert np.allclose(pp, pn, atol=1e-13)
    dY = rng.normal(size=yp.shape)
    for a, b_ in zip(kpy.dense_backward(dY, X, W, pp, yp, act),
                     knat.dense_backward(dY, X, W, pn, yn, act)):
        assert np.allclose(a, b_, atol=1e-12)


@needs_native
def test_optimizer_steps_agree():
    rng = np.random.default_rng(42)
    g = rng.normal(size=23)
    p1, p2 = rng.normal(size=23), None
    p2 = p1.copy()
    m1, v1 = np.zeros(23), np.zeros(23)
    m2, v2 = np.zeros(23), np.zeros(23)
    for t in range(1, 6):
        kpy.adam_step(p1, g, m1, v1, t, 1e-3, 0.9, 0.999, 1e-8)
        knat.adam_step(p2, g, m2, v2, t, 1e-3, 0.9, 0.999, 1e-8)
    assert np.allclose(p1, p2, atol=1e-15)
    vel1, vel2 = np.zeros(23), np.zeros(23)
    for _ in range(5):
        kpy.nesterov_step(p1, g, vel1, 0.05, 0.9)
        knat.nesterov_step(p2, g, vel2, 0.05, 0.9)
    assert np.allclose(p1, p2, atol=1e-15)


@needs_native
def test_gmm_kernels_agree():
    rng = np.random.default_rng(3)
    S, k, d, N = 7, 4, 3, 101
    means = rng.normal(size=(S, k, d))
    variances = rng.uniform(0.1, 2.0, size=(S, k, d))
    logits = rng.normal(size=(S, k))
    idx = rng.integers(0, S, size=N)
    X = rng.normal(size=(N, d))
    assert np.allclose(
        kpy.gmm_diag_logpdf(X, idx, means, variances, logits),
        knat.gmm_diag_logpdf(X, idx, means, variances, logits),
        atol=1e-12,
    )
    outp = kpy.gmm_diag_nll_grad(X, idx, means, variances, logits)
    outn = knat.gmm_diag_nll_grad(X, idx, means, variances, logits)
    assert outp[0] == pytest.approx(outn[0], abs=1e-12)
    for a, b_ in zip(outp[1:], outn[1:]):
        assert np.allclose(a, b_, atol=1e-12)


def test_gmm_logpdf_matches_dense_formula():
    rng = np.random.default_rng(4)
    S, k, d, N = 3, 2, 2, 40
    means = rng.normal(size=(S, k, d))
    variances = rng.uniform(0.2, 1.5, size=(S, k, d))
    logits = rng.normal(size=(S, k))
    idx = rng.integers(0, S, size=N)
    X = rng.normal(size=(N, d))
    got = backend.gmm_diag_logpdf(X, idx, means, variances, logits)
    w = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    for n in range(N):
        s = idx[n]
        dens = 0.0
        for i in range(k):
            quad = ((X[n] - means[s, i]) ** 2 / variances[s, i]).sum()
            norm = np.sqrt((2 * np.pi) ** d * np.prod(variances[s, i]))
            dens += w[s, i] * np.exp(-0.5 * quad) / norm
        assert got[n] == pytest.approx(np.log(dens), rel=1e-10)
