# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the dense-layer and mixture-density hot loops.

Mirrors the API of ``_kernels_py``; GEMMs go through BLAS, everything
else is fused C loops. See ``backend.py`` for selection.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

LINEAR, RELU, ELU_PLUS_ONE, SOFTMAX = 0, 1, 2, 3
ELU_EPS = 1e-6

cdef double _ELU_EPS = 1e-6
cdef double _LOG_2PI = 1.8378770664093453


# ---------------------------------------------------------------------------
# BLAS helpers on row-major (C-order) buffers

cdef void _mm_nn(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C) noexcept nogil:
    # C (M,N) = A (M,K) @ B (K,N)
    cdef int M = A.shape[0], K = A.shape[1], N = B.shape[1]
    cdef double alpha = 1.0, beta = 0.0
    dgemm("N", "N", &N, &M, &K, &alpha, &B[0, 0], &N, &A[0, 0], &K, &beta, &C[0, 0], &N)


cdef void _mm_nt(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C) noexcept nogil:
    # C (M,N) = A (M,K) @ B.T with B (N,K)
    cdef int M = A.shape[0], K = A.shape[1], N = B.shape[0]
    cdef double alpha = 1.0, beta = 0.0
    dgemm("T", "N", &N, &M, &K, &alpha, &B[0, 0], &K, &A[0, 0], &K, &beta, &C[0, 0], &N)


cdef void _mm_tn(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C) noexcept nogil:
    # C (M,N) = A.T @ B with A (K,M), B (K,N)
    cdef int K = A.shape[0], M = A.shape[1], N = B.shape[1]
    cdef double alpha = 1.0, beta = 0.0
    dgemm("N", "T", &N, &M, &K, &alpha, &B[0, 0], &N, &A[0, 0], &M, &beta, &C[0, 0], &N)


# ---------------------------------------------------------------------------
# dense layers


def dense_forward(X, W, b, int act):
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[:, ::1] Wv = np.ascontiguousarray(W, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], out = Wv.shape[0]
    pre_arr = np.empty((n, out), dtype=np.float64)
    cdef double[:, ::1] pre = pre_arr
    cdef Py_ssize_t i, j
    cdef double v, mx, total
    with nogil:
        _mm_nt(Xv, Wv, pre)
        for i in range(n):
            for j in range(out):
                pre[i, j] += bv[j]
    if act == 0:
        return pre_arr, pre_arr
    out_arr = np.empty((n, out), dtype=np.float64)
    cdef double[:, ::1] o = out_arr
    with nogil:
        if act == 1:
            for i in range(n):
                for j in range(out):
                    v = pre[i, j]
                    o[i, j] = v if v > 0.0 else 0.0
        elif act == 2:
            for i in range(n):
                for j in range(out):
                    v = pre[i, j]
                    o[i, j] = v + 1.0 + _ELU_EPS if v > 0.0 else exp(v) + _ELU_EPS
        else:
            for i in range(n):
                mx = pre[i, 0]
                for j in range(1, out):
                    if pre[i, j] > mx:
                        mx = pre[i, j]
                total = 0.0
                for j in range(out):
                    v = exp(pre[i, j] - mx)
                    o[i, j] = v
                    total += v
                for j in range(out):
                    o[i, j] /= total
    return out_arr, pre_arr


def dense_backward(dY, X, W, pre, Y, int act):
    cdef double[:, ::1] dYv = np.ascontiguousarray(dY, dtype=np.float64)
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[:, ::1] Wv = np.ascontiguousarray(W, dtype=np.float64)
    cdef double[:, ::1] prev = np.ascontiguousarray(pre, dtype=np.float64)
    cdef Py_ssize_t n = dYv.shape[0], out = Wv.shape[0], din = Wv.shape[1]
    cdef double[:, ::1] Yv
    dpre_arr = np.empty((n, out), dtype=np.float64)
    cdef double[:, ::1] dpre = dpre_arr
    cdef Py_ssize_t i, j
    cdef double v, dot
    if act == 3:
        Yv = np.ascontiguousarray(Y, dtype=np.float64)
        with nogil:
            for i in range(n):
                dot = 0.0
                for j in range(out):
                    dot += dYv[i, j] * Yv[i, j]
                for j in range(out):
                    dpre[i, j] = Yv[i, j] * (dYv[i, j] - dot)
    else:
        with nogil:
            if act == 0:
                for i in range(n):
                    for j in range(out):
                        dpre[i, j] = dYv[i, j]
            elif act == 1:
                for i in range(n):
                    for j in range(out):
                        dpre[i, j] = dYv[i, j] if prev[i, j] > 0.0 else 0.0
            else:
                for i in range(n):
                    for j in range(out):
                        v = prev[i, j]
                        dpre[i, j] = dYv[i, j] if v > 0.0 else dYv[i, j] * exp(v)
    dW_arr = np.empty((out, din), dtype=np.float64)
    db_arr = np.zeros(out, dtype=np.float64)
    dX_arr = np.empty((n, din), dtype=np.float64)
    cdef double[:, ::1] dW = dW_arr
    cdef double[::1] db = db_arr
    cdef double[:, ::1] dX = dX_arr
    with nogil:
        _mm_tn(dpre, Xv, dW)
        _mm_nn(dpre, Wv, dX)
        for i in range(n):
            for j in range(out):
                db[j] += dpre[i, j]
    return dX_arr, dW_arr, db_arr


# ---------------------------------------------------------------------------
# optimizer updates


def adam_step(p, g, m, v, long t, double lr, double beta1, double beta2, double eps):
    cdef double[::1] pv = p, gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[::1] mv = m, vv = v
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double gi, mhat, vhat
    with nogil:
        for i in range(n):
            gi = gv[i]
            mv[i] = beta1 * mv[i] + (1.0 - beta1) * gi
            vv[i] = beta2 * vv[i] + (1.0 - beta2) * gi * gi
            mhat = mv[i] / bc1
            vhat = vv[i] / bc2
            pv[i] -= lr * mhat / (sqrt(vhat) + eps)


def nesterov_step(p, g, vel, double lr, double momentum):
    cdef double[::1] pv = p, gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[::1] velv = vel
    cdef Py_ssize_t i, n = pv.shape[0]
    with nogil:
        for i in range(n):
            velv[i] = momentum * velv[i] + gv[i]
            pv[i] -= lr * (gv[i] + momentum * velv[i])


# ---------------------------------------------------------------------------
# diagonal Gaussian mixtures


def gmm_diag_logpdf(X, idx, means, variances, logits):
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef long[::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef double[:, :, ::1] mu = np.ascontiguousarray(means, dtype=np.float64)
    cdef double[:, :, ::1] var = np.ascontiguousarray(variances, dtype=np.float64)
    cdef double[:, ::1] lg = np.ascontiguousarray(logits, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], d = Xv.shape[1]
    cdef Py_ssize_t s = mu.shape[0], k = mu.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    logw_arr = np.empty((s, k), dtype=np.float64)
    logdet_arr = np.empty((s, k), dtype=np.float64)
    cdef double[:, ::1] logw = logw_arr, logdet = logdet_arr
    cdef double comp[256]
    cdef Py_ssize_t i, j, c, row
    cdef double mx, total, quad, diff
    if k > 256:
        raise ValueError("component count too large for the native kernel")
    with nogil:
        for row in range(s):
            mx = lg[row, 0]
            for c in range(1, k):
                if lg[row, c] > mx:
                    mx = lg[row, c]
            total = 0.0
            for c in range(k):
                total += exp(lg[row, c] - mx)
            total = mx + log(total)
            for c in range(k):
                logw[row, c] = lg[row, c] - total
                quad = 0.0
                for j in range(d):
                    quad += log(var[row, c, j])
                logdet[row, c] = quad
        for i in range(n):
            row = iv[i]
            mx = -1e300
            for c in range(k):
                quad = 0.0
                for j in range(d):
                    diff = Xv[i, j] - mu[row, c, j]
                    quad += diff * diff / var[row, c, j]
                comp[c] = logw[row, c] - 0.5 * (quad + logdet[row, c] + d * _LOG_2PI)
                if comp[c] > mx:
                    mx = comp[c]
            total = 0.0
            for c in range(k):
                total += exp(comp[c] - mx)
            out[i] = mx + log(total)
    return out_arr


def gmm_diag_nll_grad(X, idx, means, variances, logits):
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef long[::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef double[:, :, ::1] mu = np.ascontiguousarray(means, dtype=np.float64)
    cdef double[:, :, ::1] var = np.ascontiguousarray(variances, dtype=np.float64)
    cdef double[:, ::1] lg = np.ascontiguousarray(logits, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], d = Xv.shape[1]
    cdef Py_ssize_t s = mu.shape[0], k = mu.shape[1]
    dmu_arr = np.zeros((s, k, d), dtype=np.float64)
    dvar_arr = np.zeros((s, k, d), dtype=np.float64)
    dlg_arr = np.zeros((s, k), dtype=np.float64)
    cdef double[:, :, ::1] dmu = dmu_arr, dvar = dvar_arr
    cdef double[:, ::1] dlg = dlg_arr
    logw_arr = np.empty((s, k), dtype=np.float64)
    logdet_arr = np.empty((s, k), dtype=np.float64)
    cdef double[:, ::1] logw = logw_arr, logdet = logdet_arr
    cdef double comp[256]
    cdef Py_ssize_t i, j, c, row
    cdef double mx, total, quad, diff, lse, nll, r, scale, iv_j
    if k > 256:
        raise ValueError("component count too large for the native kernel")
    nll = 0.0
    scale = -1.0 / n
    with nogil:
        for row in range(s):
            mx = lg[row, 0]
            for c in range(1, k):
                if lg[row, c] > mx:
                    mx = lg[row, c]
            total = 0.0
            for c in range(k):
                total += exp(lg[row, c] - mx)
            total = mx + log(total)
            for c in range(k):
                logw[row, c] = lg[row, c] - total
                quad = 0.0
                for j in range(d):
                    quad += log(var[row, c, j])
                logdet[row, c] = quad
        for i in range(n):
            row = iv[i]
            mx = -1e300
            for c in range(k):
                quad = 0.0
                for j in range(d):
                    diff = Xv[i, j] - mu[row, c, j]
                    quad += diff * diff / var[row, c, j]
                comp[c] = logw[row, c] - 0.5 * (quad + logdet[row, c] + d * _LOG_2PI)
                if comp[c] > mx:
                    mx = comp[c]
            total = 0.0
            for c in range(k):
                total += exp(comp[c] - mx)
            lse = mx + log(total)
            nll -= lse
            for c in range(k):
                r = exp(comp[c] - lse)
                dlg[row, c] += scale * (r - exp(logw[row, c]))
                for j in range(d):
                    iv_j = 1.0 / var[row, c, j]
                    diff = Xv[i, j] - mu[row, c, j]
                    dmu[row, c, j] += scale * r * diff * iv_j
                    dvar[row, c, j] += scale * r * 0.5 * (diff * diff * iv_j * iv_j - iv_j)
    return nll / n, dmu_arr, dvar_arr, dlg_arr
