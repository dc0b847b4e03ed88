"""Few-shot adaptation of the channel model and decoder input.

The per-component affine parameters psi are fit by minimizing a
regularized objective on a small labeled target dataset: a data term
(negative symbol-posterior log-likelihood in discriminative mode,
negative conditional log-likelihood in generative mode) plus lambda
times the closed-form divergence between the source mixtures and their
transformed versions. Minimization uses BFGS from the identity psi; the
regularization weight is picked from a grid by a validation metric
computed on the transformed target data. The encoder, decoder and
channel-model weights are never modified.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gmm

DEFAULT_LAMBDA_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0)


@dataclass
class AdaptationConfig:
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    bfgs_max_iters: int = 200
    bfgs_grad_tol: float = 1e-6
    mode: str = "discriminative"

    def __post_init__(self):
        if len(self.lambda_grid) == 0:
            raise ValueError("lambda grid must be nonempty")
        if any(lam < 0.0 for lam in self.lambda_grid):
            raise ValueError("lambda values must be nonnegative")
        if self.mode not in ("discriminative", "generative"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class LambdaRecord:
    lam: float
    psi: gmm.AdaptationParams
    objective_trace: list
    validation: float
    iterations: int
    converged: bool
    failed: bool = False


@dataclass
class AdaptationResult:
    psi_star: gmm.AdaptationParams
    lambda_star: float
    records: list
    target: gmm.ConditionalMixture
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "lambda_star": self.lambda_star,
            "psi_star": self.psi_star.to_dict(),
            "per_lambda": [
                {
                    "lambda": r.lam,
                    "validation": r.validation,
                    "iterations": r.iterations,
                    "converged": r.converged,
                    "failed": r.failed,
                    "objective_trace": [float(v) for v in r.objective_trace],
                }
                for r in self.records
            ],
            "diagnostics": self.diagnostics,
        }


class AdaptationError(RuntimeError):
    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records or []


# ---------------------------------------------------------------------------
# objectives


def _resolve_symbol_indices(Z, constellation: gmm.SymbolConstellation) -> np.ndarray:
    """Match transmitted-symbol rows to constellation indices exactly-ish."""
    Z = np.asarray(Z)
    if Z.ndim == 1 and not np.issubdtype(Z.dtype, np.floating):
        return Z.astype(np.int64)
    dists = np.linalg.norm(Z[:, None, :] - constellation.symbols[None], axis=2)
    idx = dists.argmin(axis=1)
    if not np.allclose(dists[np.arange(len(idx)), idx], 0.0, atol=1e-9):
        raise ValueError("some z rows are not constellation points")
    return idx.astype(np.int64)


def _transformed_arrays(psi: gmm.AdaptationParams, source: gmm.ConditionalMixture):
    mu_hat = np.einsum("kde,ske->skd", psi.A, source.means) + psi.b[None]
    v_hat = (psi.C**2)[None] * source.variances
    logits_hat = psi.beta[None] * source.logits + psi.gamma[None]
    return mu_hat, v_hat, logits_hat


def _data_term(psi: gmm.AdaptationParams, X, z_idx, source: gmm.ConditionalMixture,
               constellation: gmm.SymbolConstellation, mode: str):
    """Value and psi-gradient of the data-dependent objective term.

    Both modes share the component-grid machinery: the gradient of any
    functional of the per-symbol mixture log-likelihoods L[n, s] is
    assembled from the coefficient matrix Q[n, s] = d(term)/dL[n, s].
    """
    n, d = X.shape
    mu_hat, v_hat, logits_hat = _transformed_arrays(psi, source)
    if np.any(v_hat <= 0.0) or not np.all(np.isfinite(v_hat)):
        return np.inf, np.zeros(psi.n_params)

    logw_hat = logits_hat - gmm._logsumexp(logits_hat, axis=-1)[:, None]  # (m, k)
    diff = X[:, None, None, :] - mu_hat[None]  # (N, m, k, d)
    quad = ((diff * diff) / v_hat[None]).sum(axis=-1)
    logdet = np.log(v_hat).sum(axis=-1)
    logn = -0.5 * (quad + logdet[None] + d * np.log(2.0 * np.pi))
    comp = logw_hat[None] + logn  # (N, m, k)
    L = gmm._logsumexp(comp, axis=-1)  # (N, m)

    rows = np.arange(n)
    if mode == "generative":
        value = -np.mean(L[rows, z_idx])
        Q = np.zeros((n, source.m))
        Q[rows, z_idx] = -1.0 / n
    else:
        logp = np.log(constellation.priors)[None] + L  # (N, m)
        log_marg = gmm._logsumexp(logp, axis=-1)
        value = -np.mean(logp[rows, z_idx] - log_marg)
        W = np.exp(logp - log_marg[:, None])  # symbol posterior (N, m)
        Q = W / n
        Q[rows, z_idx] -= 1.0 / n

    if not np.isfinite(value):
        return np.inf, np.zeros(psi.n_params)

    resp = np.exp(comp - L[:, :, None])  # (N, m, k)
    dcomp = Q[:, :, None] * resp  # (N, m, k)

    # prior logits: logw = alpha_hat - lse(alpha_hat)
    dlogw = dcomp.sum(axis=0)  # (m, k)
    pi_hat = np.exp(logw_hat)
    dalpha_hat = dlogw - pi_hat * dlogw.sum(axis=1, keepdims=True)
    dbeta = (dalpha_hat * source.logits).sum(axis=0)
    dgamma = dalpha_hat.sum(axis=0)

    # Gaussian terms
    inv_v = 1.0 / v_hat
    dmu_hat = np.einsum("nsk,nskd->skd", dcomp, diff * inv_v[None])
    dv_hat = np.einsum("nsk,nskd->skd", dcomp,
                       0.5 * ((diff * diff) * (inv_v * inv_v)[None] - inv_v[None]))
    dA = np.einsum("skd,ske->kde", dmu_hat, source.means)
    db = dmu_hat.sum(axis=0)
    dc = (dv_hat * 2.0 * psi.C[None] * source.variances).sum(axis=0)

    grad = gmm.AdaptationParams(dA, db, dc, dbeta, dgamma, validate=False).to_vector()
    return float(value), grad


def _check_adapt_inputs(psi, source, constellation):
    if not (source.is_diagonal and psi.diagonal_c):
        raise ValueError("adaptation objectives require diagonal covariances and diagonal C")
    if psi.k != source.k or psi.d != source.d or constellation.m != source.m:
        raise ValueError("psi/mixture/constellation shapes disagree")


def objective_pll(psi: gmm.AdaptationParams, lam: float, X, Z, source, constellation):
    """Discriminative objective: mean negative symbol-posterior
    log-likelihood plus lam times the corresponding-component divergence.

    Z may hold transmitted-symbol rows or integer symbol indices.
    Returns (value, gradient) with the gradient in psi vector layout.
    """
    return _objective(psi, lam, X, Z, source, constellation, "discriminative")


def objective_cll(psi: gmm.AdaptationParams, lam: float, X, Z, source, constellation):
    """Generative objective: mean negative conditional log-likelihood
    plus lam times the corresponding-component divergence."""
    return _objective(psi, lam, X, Z, source, constellation, "generative")


def _objective(psi, lam, X, Z, source, constellation, mode):
    _check_adapt_inputs(psi, source, constellation)
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("target data must be nonempty")
    z_idx = _resolve_symbol_indices(Z, constellation)
    value, grad = _data_term(psi, X, z_idx, source, constellation, mode)
    if not np.isfinite(value):
        return np.inf, grad
    if lam != 0.0:
        kl, kl_grad = gmm.kl_corresponding_with_grad(source, psi, constellation)
        value += lam * kl
        grad = grad + lam * kl_grad
    return value, grad


# ---------------------------------------------------------------------------
# BFGS


def bfgs_minimize(objective, x0, max_iters: int = 200, grad_tol: float = 1e-6):
    """BFGS with a weak-Wolfe line search (Armijo c1=1e-4, curvature c2=0.9).

    objective maps a vector to (value, gradient). Non-finite values
    during the line search shrink the step. Returns (x_best, info) where
    info records the trace, iteration count and a converged flag; the
    best-seen iterate is never worse than the start.
    """
    c1, c2 = 1e-4, 0.9
    x = np.asarray(x0, dtype=float).copy()
    f, g = objective(x)
    if not np.isfinite(f):
        raise ValueError("objective must be finite at the starting point")
    dim = x.shape[0]
    H = np.eye(dim)
    best_f, best_x = f, x.copy()
    trace = [f]
    converged = bool(np.linalg.norm(g) <= grad_tol)
    iters = 0
    line_search_failed = False

    while not converged and iters < max_iters:
        p = -H @ g
        gp = float(g @ p)
        if not np.isfinite(gp) or gp >= 0.0:
            H = np.eye(dim)
            p = -g
            gp = float(g @ p)
            if gp >= 0.0:
                break
        f_new, g_new, alpha = _weak_wolfe(objective, x, f, g, p, gp, c1, c2)
        if alpha == 0.0:
            line_search_failed = True
            break
        s = alpha * p
        x = x + s
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * max(np.linalg.norm(y), 1e-300):
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) \
                + rho * (1.0 + rho * float(y @ Hy)) * np.outer(s, s)
        f, g = f_new, g_new
        iters += 1
        trace.append(f)
        if f < best_f:
            best_f, best_x = f, x.copy()
        if np.linalg.norm(g) <= grad_tol:
            converged = True

    info = {
        "iterations": iters,
        "converged": converged,
        "trace": trace,
        "final_value": best_f,
        "line_search_failed": line_search_failed,
    }
    return best_x, info


def _weak_wolfe(objective, x, f0, g0, p, gp, c1, c2, max_evals: int = 60):
    lo, hi = 0.0, np.inf
    alpha = 1.0
    fallback = None
    for _ in range(max_evals):
        f_a, g_a = objective(x + alpha * p)
        if not np.isfinite(f_a) or f_a > f0 + c1 * alpha * gp:
            hi = alpha
            alpha = 0.5 * (lo + hi)
        elif float(g_a @ p) < c2 * gp:
            fallback = (f_a, g_a, alpha)
            lo = alpha
            alpha = 2.0 * lo if np.isinf(hi) else 0.5 * (lo + hi)
        else:
            return f_a, g_a, alpha
        if hi - lo < 1e-16 and np.isfinite(hi):
            break
    if fallback is not None:
        return fallback
    return f0, g0, 0.0


# ---------------------------------------------------------------------------
# validation metric and orchestration


def validation_metric(psi: gmm.AdaptationParams, dataset, predictor, mode: str,
                      source: gmm.ConditionalMixture,
                      constellation: gmm.SymbolConstellation) -> float:
    """Score an adapted psi on the transformed target data (lower is better).

    Discriminative: mean negative decoder log-likelihood of the true
    labels at the transformed inputs. Generative: mean negative source
    conditional log-likelihood of the transformed inputs.
    """
    target = gmm.apply_param_transform(source, psi)
    X_back = gmm.expected_inverse_transform_batch(dataset.X, psi, source, target, constellation)
    if mode == "discriminative":
        probs, _ = predictor.decode_batch(X_back)
        picked = np.maximum(probs[np.arange(len(dataset)), dataset.y], 1e-300)
        return float(-np.mean(np.log(picked)))
    z_idx = _resolve_symbol_indices(dataset.y, constellation)
    return float(-np.mean(source.log_pdf_batch(X_back, z_idx)))


def adapt(source: gmm.ConditionalMixture, decoder, dataset,
          constellation: gmm.SymbolConstellation,
          config: AdaptationConfig | None = None) -> AdaptationResult:
    """Grid-search lambda, BFGS-minimize the objective for each value from
    the identity psi, and keep the solution with the smallest validation
    metric. Never touches network weights.
    """
    config = config or AdaptationConfig()
    if len(dataset) < 1:
        raise AdaptationError("target dataset is empty")
    X = np.asarray(dataset.X, dtype=float)
    z_idx = _resolve_symbol_indices(dataset.y, constellation)
    psi0 = gmm.AdaptationParams.identity(source.k, source.d)
    x0 = psi0.to_vector()
    k, d = source.k, source.d

    def make_objective(lam):
        def fn(vec):
            psi = gmm.AdaptationParams.from_vector(vec, k, d, validate=False)
            return _objective(psi, lam, X, z_idx, source, constellation, config.mode)

        return fn

    records = []
    for lam in config.lambda_grid:
        try:
            vec, info = bfgs_minimize(make_objective(lam), x0,
                                      max_iters=config.bfgs_max_iters,
                                      grad_tol=config.bfgs_grad_tol)
            psi = gmm.AdaptationParams.from_vector(vec, k, d, validate=True)
            score = validation_metric(psi, dataset, decoder, config.mode, source, constellation)
            if not np.isfinite(score):
                raise ValueError("validation metric is non-finite")
            records.append(LambdaRecord(lam, psi, info["trace"], float(score),
                                        info["iterations"], info["converged"]))
        except (ValueError, np.linalg.LinAlgError) as exc:
            records.append(LambdaRecord(lam, psi0, [], float("inf"), 0, False, failed=True))
            records[-1].objective_trace = [f"failed: {exc}"]
    usable = [r for r in records if not r.failed]
    if not usable:
        raise AdaptationError("every lambda run failed", records)
    best = min(usable, key=lambda r: r.validation)
    target = gmm.apply_param_transform(source, best.psi)
    return AdaptationResult(best.psi, best.lam, records, target,
                            diagnostics={"n_target": len(dataset), "mode": config.mode})


class AdaptedDecoder:
    """Decoder composed with the expected inverse feature transformation."""

    def __init__(self, decoder, psi: gmm.AdaptationParams, source: gmm.ConditionalMixture,
                 constellation: gmm.SymbolConstellation):
        self.decoder = decoder
        self.psi = psi
        self.source = source
        self.constellation = constellation
        self.target = gmm.apply_param_transform(source, psi)

    def transform(self, X, batch: int = 8192) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.empty_like(X)
        for start in range(0, X.shape[0], batch):
            sl = slice(start, start + batch)
            out[sl] = gmm.expected_inverse_transform_batch(
                X[sl], self.psi, self.source, self.target, self.constellation
            )
        return out

    def decode_batch(self, X):
        return self.decoder.decode_batch(self.transform(X))

    def decode(self, x):
        probs, pred = self.decode_batch(np.asarray(x, dtype=float)[None, :])
        return probs[0], int(pred[0])

    def __call__(self, X):
        return self.decode_batch(X)[1]


def adapted_decoder(decoder, result: AdaptationResult, source: gmm.ConditionalMixture,
                    constellation: gmm.SymbolConstellation) -> AdaptedDecoder:
    return AdaptedDecoder(decoder, result.psi_star, source, constellation)
