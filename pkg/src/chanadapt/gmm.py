"""Gaussian mixture math for the learned channel model.

Everything here operates on per-symbol Gaussian mixtures: each of the m
symbols has a k-component mixture over R^d. Mixtures are stored
array-backed (component parameters stacked over symbols) so the batched
operations used by training and evaluation stay vectorized. Covariances
are diagonal by default; full covariances are supported behind the same
interface where noted.

All densities and posteriors are computed in log space with
log-sum-exp stabilization. Functions are pure and safe to call from
multiple threads; random state is always passed explicitly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

VARIANCE_FLOOR = 1e-8
C_DIAG_FLOOR = 1e-8
_LOG_2PI = np.log(2.0 * np.pi)

# incremented when a posterior underflows to all-zero and is replaced by
# a uniform table (should not happen for finite inputs)
UNDERFLOW_COUNT = 0


def _softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _logsumexp(a, axis=-1):
    mx = a.max(axis=axis, keepdims=True)
    out = mx + np.log(np.exp(a - mx).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _as_float_array(x, name):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class GaussianComponent:
    """One mixture component: prior logit, mean and covariance.

    ``covariance`` is either a length-d vector of variances (diagonal
    case) or a d x d symmetric positive-definite matrix.
    """

    prior_logit: float
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = _as_float_array(self.mean, "mean")
        cov = _as_float_array(self.covariance, "covariance")
        if not np.isfinite(self.prior_logit):
            raise ValueError("prior_logit must be finite")
        if cov.ndim == 1:
            if cov.shape[0] != mean.shape[0]:
                raise ValueError("mean and variance vector lengths differ")
            if np.any(cov <= 0.0):
                raise ValueError("variances must be positive")
        elif cov.ndim == 2:
            if cov.shape != (mean.shape[0], mean.shape[0]):
                raise ValueError("covariance shape does not match mean")
            if not np.allclose(cov, cov.T):
                raise ValueError("covariance must be symmetric")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ValueError("covariance must be positive definite") from exc
        else:
            raise ValueError("covariance must be a vector or a matrix")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return self.covariance.ndim == 1


class ConditionalMixture:
    """Per-symbol Gaussian mixtures phi(z) with a shared component count.

    Parameters are stacked arrays: ``logits`` (m, k), ``means`` (m, k, d)
    and either ``variances`` (m, k, d) for the diagonal case or
    ``covariances`` (m, k, d, d) for full covariances.
    """

    def __init__(self, logits, means, variances=None, covariances=None):
        self.logits = _as_float_array(logits, "logits")
        self.means = _as_float_array(means, "means")
        if self.logits.ndim != 2 or self.means.ndim != 3:
            raise ValueError("logits must be (m, k) and means (m, k, d)")
        m, k = self.logits.shape
        if self.means.shape[:2] != (m, k):
            raise ValueError("means and logits disagree on (m, k)")
        if (variances is None) == (covariances is None):
            raise ValueError("provide exactly one of variances/covariances")
        if variances is not None:
            self.variances = _as_float_array(variances, "variances")
            if self.variances.shape != self.means.shape:
                raise ValueError("variances shape must match means")
            if np.any(self.variances <= 0.0):
                raise ValueError("variances must be positive")
            self.covariances = None
        else:
            self.covariances = _as_float_array(covariances, "covariances")
            d = self.means.shape[2]
            if self.covariances.shape != (m, k, d, d):
                raise ValueError("covariances must be (m, k, d, d)")
            for s in range(m):
                for i in range(k):
                    cov = self.covariances[s, i]
                    if not np.allclose(cov, cov.T):
                        raise ValueError("covariances must be symmetric")
                    try:
                        np.linalg.cholesky(cov)
                    except np.linalg.LinAlgError as exc:
                        raise ValueError(
                            f"covariance of symbol {s} component {i} not PD"
                        ) from exc
            self.variances = None

    @property
    def m(self) -> int:
        return self.logits.shape[0]

    @property
    def k(self) -> int:
        return self.logits.shape[1]

    @property
    def d(self) -> int:
        return self.means.shape[2]

    @property
    def is_diagonal(self) -> bool:
        return self.variances is not None

    def weights(self) -> np.ndarray:
        """Mixture weights pi_i(z) = softmax(alpha(z)), shape (m, k)."""
        return _softmax(self.logits)

    def components(self, symbol: int) -> list[GaussianComponent]:
        cov = self.variances if self.is_diagonal else self.covariances
        return [
            GaussianComponent(self.logits[symbol, i], self.means[symbol, i], cov[symbol, i])
            for i in range(self.k)
        ]

    @classmethod
    def from_components(cls, per_symbol: list[list[GaussianComponent]]) -> "ConditionalMixture":
        if not per_symbol:
            raise ValueError("need at least one symbol")
        k = len(per_symbol[0])
        if any(len(comps) != k for comps in per_symbol):
            raise ValueError("all symbols must have the same component count")
        diag = per_symbol[0][0].is_diagonal
        logits = np.array([[c.prior_logit for c in comps] for comps in per_symbol])
        means = np.array([[c.mean for c in comps] for comps in per_symbol])
        covs = np.array([[c.covariance for c in comps] for comps in per_symbol])
        if diag:
            return cls(logits, means, variances=covs)
        return cls(logits, means, covariances=covs)

    def log_pdf(self, symbol: int, x) -> float:
        """log P(x | z_symbol) under that symbol's mixture."""
        x = np.asarray(x, dtype=float)
        return float(self.log_pdf_batch(x[None, :], np.array([symbol]))[0])

    def log_pdf_batch(self, X, symbol_idx) -> np.ndarray:
        """log P(x_n | z_{symbol_idx[n]}) for a batch, shape (N,)."""
        X = np.asarray(X, dtype=float)
        if X.shape[1] != self.d:
            raise ValueError("sample dimension does not match mixture")
        comp = self.component_log_pdf_grid(X)  # (N, m, k) log w + log N
        sel = comp[np.arange(X.shape[0]), symbol_idx]
        return _logsumexp(sel, axis=-1)

    def component_log_pdf_grid(self, X) -> np.ndarray:
        """log pi_i(z) + log N(x | mu_i(z), Sigma_i(z)) over the full grid.

        Returns an (N, m, k) array used by posteriors and likelihoods.
        """
        X = np.asarray(X, dtype=float)
        logw = self.logits - _logsumexp(self.logits, axis=-1)[:, None]  # (m, k)
        if self.is_diagonal:
            diff = X[:, None, None, :] - self.means[None]  # (N, m, k, d)
            quad = ((diff * diff) / self.variances[None]).sum(axis=-1)
            logdet = np.log(self.variances).sum(axis=-1)  # (m, k)
            logn = -0.5 * (quad + logdet[None] + self.d * _LOG_2PI)
        else:
            m, k, d = self.m, self.k, self.d
            logn = np.empty((X.shape[0], m, k))
            for s in range(m):
                for i in range(k):
                    chol = np.linalg.cholesky(self.covariances[s, i])
                    diff = X - self.means[s, i]
                    sol = np.linalg.solve(chol, diff.T)
                    quad = (sol * sol).sum(axis=0)
                    logdet = 2.0 * np.log(np.diag(chol)).sum()
                    logn[:, s, i] = -0.5 * (quad + logdet + d * _LOG_2PI)
        return logw[None] + logn

    def to_dict(self) -> dict:
        out = {
            "m": self.m,
            "k": self.k,
            "d": self.d,
            "covariance": "diagonal" if self.is_diagonal else "full",
            "symbols": [],
        }
        for s in range(self.m):
            comps = []
            for i in range(self.k):
                entry = {
                    "prior_logit": float(self.logits[s, i]),
                    "mean": self.means[s, i].tolist(),
                }
                if self.is_diagonal:
                    entry["variance"] = self.variances[s, i].tolist()
                else:
                    entry["covariance"] = self.covariances[s, i].tolist()
                comps.append(entry)
            out["symbols"].append({"components": comps})
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ConditionalMixture":
        diag = data["covariance"] == "diagonal"
        logits = np.array(
            [[c["prior_logit"] for c in sym["components"]] for sym in data["symbols"]]
        )
        means = np.array([[c["mean"] for c in sym["components"]] for sym in data["symbols"]])
        key = "variance" if diag else "covariance"
        covs = np.array([[c[key] for c in sym["components"]] for sym in data["symbols"]])
        if diag:
            return cls(logits, means, variances=covs)
        return cls(logits, means, covariances=covs)


@dataclass
class SymbolConstellation:
    """The m encoder symbols z in R^d together with symbol priors p(z)."""

    symbols: np.ndarray
    priors: np.ndarray

    def __post_init__(self):
        self.symbols = _as_float_array(self.symbols, "symbols")
        self.priors = _as_float_array(self.priors, "priors")
        if self.symbols.ndim != 2 or self.symbols.shape[0] < 2:
            raise ValueError("need at least two symbols, shape (m, d)")
        if self.priors.shape != (self.symbols.shape[0],):
            raise ValueError("priors must have one entry per symbol")
        if np.any(self.priors < 0.0) or abs(self.priors.sum() - 1.0) > 1e-12:
            raise ValueError("priors must be nonnegative and sum to 1")

    @property
    def m(self) -> int:
        return self.symbols.shape[0]

    @property
    def d(self) -> int:
        return self.symbols.shape[1]

    @classmethod
    def uniform(cls, symbols) -> "SymbolConstellation":
        symbols = np.asarray(symbols, dtype=float)
        m = symbols.shape[0]
        return cls(symbols, np.full(m, 1.0 / m))

    @classmethod
    def from_class_proportions(cls, symbols, labels, m=None) -> "SymbolConstellation":
        """Priors estimated as empirical class proportions of a dataset."""
        symbols = np.asarray(symbols, dtype=float)
        m = symbols.shape[0] if m is None else m
        counts = np.bincount(np.asarray(labels, dtype=int), minlength=m).astype(float)
        if counts.sum() <= 0:
            return cls.uniform(symbols)
        return cls(symbols, counts / counts.sum())

    def average_power(self) -> float:
        return float(np.mean((self.symbols**2).sum(axis=1)))


class AdaptationParams:
    """Per-component affine parameters (A_i, b_i, C_i, beta_i, gamma_i).

    ``A`` is (k, d, d); ``b`` is (k, d); ``C`` is (k, d) holding the
    diagonal of C_i (the default shape) or (k, d, d) for full C_i;
    ``beta`` and ``gamma`` are (k,).

    The flattened vector layout is component-major: for each component,
    A_i row-major, then b_i, then the C_i entries (diagonal, or row-major
    when full), then beta_i, gamma_i. That layout is what the optimizer
    and checkpoints use.
    """

    def __init__(self, A, b, C, beta, gamma, validate=True):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.C = np.asarray(C, dtype=float)
        self.beta = np.asarray(beta, dtype=float)
        self.gamma = np.asarray(gamma, dtype=float)
        k, d = self.b.shape
        if self.A.shape != (k, d, d):
            raise ValueError("A must be (k, d, d)")
        if self.C.shape not in ((k, d), (k, d, d)):
            raise ValueError("C must be (k, d) diagonal or (k, d, d) full")
        if self.beta.shape != (k,) or self.gamma.shape != (k,):
            raise ValueError("beta and gamma must be (k,)")
        if validate:
            for arr, name in ((self.A, "A"), (self.b, "b"), (self.C, "C"),
                              (self.beta, "beta"), (self.gamma, "gamma")):
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"{name} contains non-finite values")
            if self.diagonal_c:
                if np.any(np.abs(self.C) < C_DIAG_FLOOR):
                    raise ValueError("diagonal C entries must stay away from zero")
            else:
                for i in range(k):
                    if np.linalg.cond(self.C[i]) > 1.0 / C_DIAG_FLOOR:
                        raise ValueError(f"C_{i} is near-singular")

    @property
    def k(self) -> int:
        return self.b.shape[0]

    @property
    def d(self) -> int:
        return self.b.shape[1]

    @property
    def diagonal_c(self) -> bool:
        return self.C.ndim == 2

    @classmethod
    def identity(cls, k: int, d: int, diagonal_c: bool = True) -> "AdaptationParams":
        A = np.tile(np.eye(d), (k, 1, 1))
        b = np.zeros((k, d))
        C = np.ones((k, d)) if diagonal_c else np.tile(np.eye(d), (k, 1, 1))
        return cls(A, b, C, np.ones(k), np.zeros(k))

    @property
    def n_params(self) -> int:
        d = self.d
        per = d * d + 2 * d + 2 if self.diagonal_c else 2 * d * d + d + 2
        return self.k * per

    def to_vector(self) -> np.ndarray:
        blocks = []
        for i in range(self.k):
            blocks.append(self.A[i].ravel())
            blocks.append(self.b[i])
            blocks.append(self.C[i].ravel())
            blocks.append(np.array([self.beta[i], self.gamma[i]]))
        return np.concatenate(blocks)

    @classmethod
    def from_vector(cls, vec, k: int, d: int, diagonal_c: bool = True,
                    validate: bool = False) -> "AdaptationParams":
        vec = np.asarray(vec, dtype=float)
        c_len = d if diagonal_c else d * d
        per = d * d + d + c_len + 2
        if vec.shape != (k * per,):
            raise ValueError(f"expected vector of length {k * per}")
        A = np.empty((k, d, d))
        b = np.empty((k, d))
        C = np.empty((k, d)) if diagonal_c else np.empty((k, d, d))
        beta = np.empty(k)
        gamma = np.empty(k)
        for i in range(k):
            off = i * per
            A[i] = vec[off:off + d * d].reshape(d, d)
            off += d * d
            b[i] = vec[off:off + d]
            off += d
            C[i] = vec[off:off + c_len].reshape(C[i].shape)
            off += c_len
            beta[i] = vec[off]
            gamma[i] = vec[off + 1]
        return cls(A, b, C, beta, gamma, validate=validate)

    def is_identity(self, tol: float = 0.0) -> bool:
        eye = np.tile(np.eye(self.d), (self.k, 1, 1))
        c_eye = np.ones((self.k, self.d)) if self.diagonal_c else eye
        return (
            np.allclose(self.A, eye, atol=tol)
            and np.allclose(self.b, 0.0, atol=tol)
            and np.allclose(self.C, c_eye, atol=tol)
            and np.allclose(self.beta, 1.0, atol=tol)
            and np.allclose(self.gamma, 0.0, atol=tol)
        )

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "d": self.d,
            "c_shape": "diagonal" if self.diagonal_c else "full",
            "components": [
                {
                    "A": self.A[i].tolist(),
                    "b": self.b[i].tolist(),
                    "C": self.C[i].tolist(),
                    "beta": float(self.beta[i]),
                    "gamma": float(self.gamma[i]),
                }
                for i in range(self.k)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AdaptationParams":
        comps = data["components"]
        A = np.array([c["A"] for c in comps])
        b = np.array([c["b"] for c in comps])
        C = np.array([c["C"] for c in comps])
        beta = np.array([c["beta"] for c in comps])
        gamma = np.array([c["gamma"] for c in comps])
        return cls(A, b, C, beta, gamma)


# ---------------------------------------------------------------------------
# densities and sampling


def mixture_log_pdf(x, components: list[GaussianComponent]) -> float:
    """log sum_i pi_i N(x | mu_i, Sigma_i) with log-sum-exp stabilization."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x contains non-finite values")
    d = components[0].dim
    if x.shape != (d,):
        raise ValueError("x dimension does not match the components")
    logits = np.array([c.prior_logit for c in components])
    logw = logits - _logsumexp(logits)
    terms = np.empty(len(components))
    for i, comp in enumerate(components):
        if comp.dim != d:
            raise ValueError("components have inconsistent dimensions")
        diff = x - comp.mean
        if comp.is_diagonal:
            quad = float((diff * diff / comp.covariance).sum())
            logdet = float(np.log(comp.covariance).sum())
        else:
            chol = np.linalg.cholesky(comp.covariance)
            sol = np.linalg.solve(chol, diff)
            quad = float(sol @ sol)
            logdet = float(2.0 * np.log(np.diag(chol)).sum())
        terms[i] = logw[i] - 0.5 * (quad + logdet + d * _LOG_2PI)
    return float(_logsumexp(terms))


def sample_mixture(components: list[GaussianComponent], rng: np.random.Generator):
    """Draw one sample: pick a component from Cat(pi), then its Gaussian.

    Returns (x, component_index).
    """
    logits = np.array([c.prior_logit for c in components])
    weights = _softmax(logits)
    idx = int(rng.choice(len(components), p=weights))
    comp = components[idx]
    u = rng.standard_normal(comp.dim)
    if comp.is_diagonal:
        x = comp.mean + np.sqrt(comp.covariance) * u
    else:
        x = comp.mean + np.linalg.cholesky(comp.covariance) @ u
    return x, idx


def sample_conditional(mixture: ConditionalMixture, symbol_idx, rng: np.random.Generator):
    """Vectorized sampling of x_n ~ P(. | z_{symbol_idx[n]}).

    Returns (X, component_indices).
    """
    symbol_idx = np.asarray(symbol_idx, dtype=int)
    n = symbol_idx.shape[0]
    weights = mixture.weights()
    cum = np.cumsum(weights, axis=1)
    u = rng.random(n)
    comp_idx = (u[:, None] > cum[symbol_idx]).sum(axis=1)
    comp_idx = np.minimum(comp_idx, mixture.k - 1)
    normals = rng.standard_normal((n, mixture.d))
    mu = mixture.means[symbol_idx, comp_idx]
    if mixture.is_diagonal:
        X = mu + np.sqrt(mixture.variances[symbol_idx, comp_idx]) * normals
    else:
        X = np.empty((n, mixture.d))
        for row in range(n):
            cov = mixture.covariances[symbol_idx[row], comp_idx[row]]
            X[row] = mu[row] + np.linalg.cholesky(cov) @ normals[row]
    return X, comp_idx


# ---------------------------------------------------------------------------
# parameter transformations


def apply_param_transform(source: ConditionalMixture, psi: AdaptationParams) -> ConditionalMixture:
    """Push the per-component affine transform through every symbol's mixture.

    mu_hat = A_i mu_i + b_i, Sigma_hat = C_i Sigma_i C_i^T and
    alpha_hat = beta_i alpha_i + gamma_i, with the same psi applied to
    every symbol.
    """
    if psi.k != source.k or psi.d != source.d:
        raise ValueError("psi shape does not match the mixture")
    means = np.einsum("kde,ske->skd", psi.A, source.means) + psi.b[None]
    logits = psi.beta[None] * source.logits + psi.gamma[None]
    if source.is_diagonal and psi.diagonal_c:
        variances = np.maximum((psi.C**2)[None] * source.variances, VARIANCE_FLOOR)
        return ConditionalMixture(logits, means, variances=variances)
    if source.is_diagonal:
        cov = source.variances[..., None] * np.eye(source.d)
    else:
        cov = source.covariances
    C = psi.C if not psi.diagonal_c else _diag_to_full(psi.C)
    tmp = np.einsum("kab,skbc->skac", C, cov)
    cov_hat = np.einsum("skac,kbc->skab", tmp, C)
    cov_hat = 0.5 * (cov_hat + np.swapaxes(cov_hat, -1, -2))
    for s in range(source.m):
        for i in range(source.k):
            try:
                np.linalg.cholesky(cov_hat[s, i])
            except np.linalg.LinAlgError as exc:
                raise ValueError("transformed covariance lost positive definiteness") from exc
    return ConditionalMixture(logits, means, covariances=cov_hat)


def _diag_to_full(c_diag):
    k, d = c_diag.shape
    out = np.zeros((k, d, d))
    out[:, np.arange(d), np.arange(d)] = c_diag
    return out


def inverse_component_transform(x, z_index: int, comp: int, psi: AdaptationParams,
                                source: ConditionalMixture) -> np.ndarray:
    """Map a target-domain point back through component (z, i):

    C_i^{-1} (x - A_i mu_i(z) - b_i) + mu_i(z).
    """
    x = np.asarray(x, dtype=float)
    mu = source.means[z_index, comp]
    shifted = x - psi.A[comp] @ mu - psi.b[comp]
    if psi.diagonal_c:
        c = psi.C[comp]
        if np.any(np.abs(c) < C_DIAG_FLOOR):
            raise ValueError("C is near-singular")
        back = shifted / c
    else:
        C = psi.C[comp]
        if np.linalg.cond(C) > 1.0 / C_DIAG_FLOOR:
            raise ValueError("C is near-singular")
        back = np.linalg.solve(C, shifted)
    return back + mu


# ---------------------------------------------------------------------------
# KL divergences


def kl_gaussians(p: GaussianComponent, q: GaussianComponent) -> float:
    """KL( N(mu, Sigma) || N(mu_hat, Sigma_hat) ), the standard closed form."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    d = p.dim
    if p.is_diagonal and q.is_diagonal:
        v, vh = p.covariance, q.covariance
        diff = q.mean - p.mean
        return float(0.5 * (np.log(vh / v) + v / vh + diff * diff / vh - 1.0).sum())
    cov_p = p.covariance if not p.is_diagonal else np.diag(p.covariance)
    cov_q = q.covariance if not q.is_diagonal else np.diag(q.covariance)
    chol_q = np.linalg.cholesky(cov_q)
    logdet_q = 2.0 * np.log(np.diag(chol_q)).sum()
    sign_p, logdet_p = np.linalg.slogdet(cov_p)
    if sign_p <= 0:
        raise ValueError("source covariance not positive definite")
    sol = np.linalg.solve(chol_q, np.linalg.solve(chol_q, cov_p).T)
    trace = np.trace(sol)
    diff = q.mean - p.mean
    w = np.linalg.solve(chol_q, diff)
    quad = float(w @ w)
    return float(0.5 * (logdet_q - logdet_p + trace + quad - d))


def kl_corresponding(source: ConditionalMixture, psi: AdaptationParams,
                     constellation: SymbolConstellation) -> float:
    """Closed-form KL between index-matched source and transformed mixtures.

    Computes sum_z p(z) [ sum_i pi_i log(pi_i / pi_hat_i)
                          + sum_i pi_i KL(N_i, N_hat_i) ]
    where the hatted parameters come from apply_param_transform.
    """
    value, _ = _kl_corresponding_impl(source, psi, constellation, want_grad=False)
    return value


def kl_corresponding_with_grad(source: ConditionalMixture, psi: AdaptationParams,
                               constellation: SymbolConstellation):
    """kl_corresponding plus its exact gradient w.r.t. the psi vector.

    Only the default psi shape (full A, diagonal C) supports gradients.
    """
    if not (source.is_diagonal and psi.diagonal_c):
        raise ValueError("gradients require diagonal covariances and diagonal C")
    return _kl_corresponding_impl(source, psi, constellation, want_grad=True)


def _kl_corresponding_impl(source, psi, constellation, want_grad):
    if constellation.m != source.m:
        raise ValueError("constellation size does not match the mixture")
    if psi.k != source.k or psi.d != source.d:
        raise ValueError("psi shape does not match the mixture")
    pz = constellation.priors  # (m,)
    pi = _softmax(source.logits)  # (m, k)
    logits_hat = psi.beta[None] * source.logits + psi.gamma[None]
    log_pi = source.logits - _logsumexp(source.logits, axis=-1)[:, None]
    log_pi_hat = logits_hat - _logsumexp(logits_hat, axis=-1)[:, None]
    pi_hat = np.exp(log_pi_hat)
    prior_term = float((pz * (pi * (log_pi - log_pi_hat)).sum(axis=1)).sum())

    if source.is_diagonal and psi.diagonal_c:
        mu = source.means  # (m, k, d)
        v = source.variances
        c = psi.C  # (k, d)
        e = np.einsum("kde,ske->skd", psi.A, mu) + psi.b[None] - mu  # (m, k, d)
        c2 = c * c
        kl_comp = (np.log(np.abs(c))[None] + 0.5 / c2[None]
                   + 0.5 * e * e / (c2[None] * v)).sum(axis=2) - 0.5 * source.d
        gauss_term = float((pz[:, None] * pi * kl_comp).sum())
        value = prior_term + gauss_term
        if not want_grad:
            return value, None

        wk = pz[:, None] * pi  # (m, k)
        # Gaussian part
        de = wk[:, :, None] * e / (c2[None] * v)  # d/d(e)
        dA = np.einsum("skd,ske->kde", de, mu)
        db = de.sum(axis=0)
        dc = (wk[:, :, None] * (1.0 / c[None] - (1.0 + e * e / v) / (c**3)[None])).sum(axis=0)
        # prior-logit part
        diff_pi = pz[:, None] * (pi_hat - pi)  # (m, k)
        dbeta = (diff_pi * source.logits).sum(axis=0)
        dgamma = diff_pi.sum(axis=0)
        grad = AdaptationParams(dA, db, dc, dbeta, dgamma, validate=False).to_vector()
        return value, grad

    # generic (full-covariance) value-only path
    target = apply_param_transform(source, psi)
    gauss_term = 0.0
    for s in range(source.m):
        src_comps = source.components(s)
        tgt_comps = target.components(s)
        for i in range(source.k):
            gauss_term += pz[s] * pi[s, i] * kl_gaussians(src_comps[i], tgt_comps[i])
    return prior_term + float(gauss_term), None


# ---------------------------------------------------------------------------
# posteriors and the expected inverse transform


def joint_posterior(x, target: ConditionalMixture,
                    constellation: SymbolConstellation) -> np.ndarray:
    """P(z, i | x) over all (symbol, component) pairs, shape (m, k)."""
    x = np.asarray(x, dtype=float)
    return joint_posterior_batch(x[None, :], target, constellation)[0]


def joint_posterior_batch(X, target: ConditionalMixture,
                          constellation: SymbolConstellation) -> np.ndarray:
    """Batched joint posterior, shape (N, m, k); rows sum to 1."""
    global UNDERFLOW_COUNT
    if constellation.m != target.m:
        raise ValueError("constellation size does not match the mixture")
    X = np.asarray(X, dtype=float)
    comp = target.component_log_pdf_grid(X)  # (N, m, k)
    with np.errstate(divide="ignore"):  # zero-prior symbols are allowed
        logp = comp + np.log(constellation.priors)[None, :, None]
    flat = logp.reshape(X.shape[0], -1)
    mx = flat.max(axis=1, keepdims=True)
    unnorm = np.exp(flat - mx)
    total = unnorm.sum(axis=1, keepdims=True)
    bad = ~np.isfinite(total[:, 0]) | (total[:, 0] <= 0.0)
    if np.any(bad):
        UNDERFLOW_COUNT += int(bad.sum())
        warnings.warn("joint posterior underflow; returning uniform for affected rows")
        unnorm[bad] = 1.0
        total[bad] = unnorm.shape[1]
    post = unnorm / total
    return post.reshape(X.shape[0], target.m, target.k)


def expected_inverse_transform(x, psi: AdaptationParams, source: ConditionalMixture,
                               target: ConditionalMixture,
                               constellation: SymbolConstellation) -> np.ndarray:
    """Posterior-weighted average of the per-(z, i) inverse affine maps."""
    x = np.asarray(x, dtype=float)
    return expected_inverse_transform_batch(x[None, :], psi, source, target, constellation)[0]


def expected_inverse_transform_batch(X, psi, source, target, constellation) -> np.ndarray:
    """Batched expected inverse transform g^{-1}(x), shape (N, d)."""
    X = np.asarray(X, dtype=float)
    post = joint_posterior_batch(X, target, constellation)  # (N, m, k)
    # offsets t_{zi} = mu_i(z) - C_i^{-1} (A_i mu_i(z) + b_i)
    mu_hat = np.einsum("kde,ske->skd", psi.A, source.means) + psi.b[None]  # (m, k, d)
    if psi.diagonal_c:
        c = psi.C  # (k, d)
        offsets = source.means - mu_hat / c[None]
        comp_w = post.sum(axis=1)  # (N, k)
        back = np.einsum("nk,kd->nd", comp_w, 1.0 / c) * X
    else:
        cinv = np.linalg.inv(psi.C)  # (k, d, d)
        offsets = source.means - np.einsum("kde,ske->skd", cinv, mu_hat)
        comp_w = post.sum(axis=1)
        back = np.einsum("nk,kde,ne->nd", comp_w, cinv, X)
    return back + np.einsum("nsk,skd->nd", post, offsets)
