"""Simulated ground-truth channels used for data generation and shifts.

Two families exist. Functional channels (AWGN, uniform fading,
Ricean/Rayleigh fading) transform whatever symbol vector is transmitted.
Class-conditional channels (random per-symbol Gaussian mixtures) are
anchored to a fixed reference constellation and draw x given the class
label, which is how the random-mixture shift datasets are built.

Noise convention: the total expected noise power per realization is
sigma0^2, i.e. the additive noise is N(0, (sigma0^2 / d) I_d). With this
convention the Eb/N0 formulas below hold verbatim; note it changes
absolute per-dimension noise levels compared to reading sigma0^2 as the
per-dimension variance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gmm


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def linear_to_db(lin: float) -> float:
    return 10.0 * np.log10(lin)


# ---------------------------------------------------------------------------
# SNR parameter formulas


def awgn_sigma0(ebno_db: float, p_avg: float = 1.0, rate: float = 2.0) -> float:
    """Noise scale for a target Eb/N0: sigma0 = sqrt(p_avg / (2 R Eb/N0))."""
    ebno = db_to_linear(ebno_db)
    return float(np.sqrt(p_avg / (2.0 * rate * ebno)))


def uniform_fading_scale(ebno_db: float, sigma0: float, p_avg: float = 1.0,
                         rate: float = 2.0) -> float:
    """Fading range a with A ~ Unif[0, a]: a = sqrt(6 R sigma0^2 Eb/N0 / p_avg)."""
    ebno = db_to_linear(ebno_db)
    return float(np.sqrt(6.0 * rate * sigma0**2 * ebno / p_avg))


def ricean_params(ebno_db: float, s_min_db: float, sigma0: float,
                  p_avg: float = 1.0, rate: float = 2.0) -> tuple[float, float]:
    """Rice parameters (nu, sigma_a) for a target Eb/N0.

    sigma_a is fixed from the smallest SNR of the family (2 sigma_a^2 =
    2 R sigma0^2 S_min / p_avg) and nu supplies the remaining power.
    Eb/N0 = S_min gives nu = 0, the Rayleigh special case.
    """
    ebno = db_to_linear(ebno_db)
    s_min = db_to_linear(s_min_db)
    if ebno < s_min:
        raise ValueError("target Eb/N0 below the family's smallest SNR")
    sigma_a = float(np.sqrt(rate * sigma0**2 * s_min / p_avg))
    nu = float(np.sqrt(2.0 * rate * sigma0**2 * (ebno - s_min) / p_avg))
    return nu, sigma_a


def params_for_snr(variant: str, ebno_db: float, p_avg: float = 1.0,
                   rate: float = 2.0, aux: dict | None = None) -> dict:
    """Channel parameters hitting a target Eb/N0 for the given variant."""
    aux = aux or {}
    if variant == "awgn":
        return {"sigma0": awgn_sigma0(ebno_db, p_avg, rate)}
    if variant == "uniform":
        sigma0 = aux.get("sigma0", awgn_sigma0(ebno_db, p_avg, rate))
        return {"sigma0": sigma0,
                "a": uniform_fading_scale(ebno_db, sigma0, p_avg, rate)}
    if variant == "ricean":
        s_min_db = aux["s_min_db"]
        sigma0 = aux.get("sigma0", awgn_sigma0(s_min_db, p_avg, rate))
        nu, sigma_a = ricean_params(ebno_db, s_min_db, sigma0, p_avg, rate)
        return {"sigma0": sigma0, "nu": nu, "sigma_a": sigma_a}
    raise ValueError(f"unknown variant {variant!r}")


# ---------------------------------------------------------------------------
# channels


class Channel:
    """Common draw interface: x given labels and the live constellation."""

    is_class_conditional = False

    def draw(self, labels, symbols, rng: np.random.Generator) -> np.ndarray:
        Z = np.asarray(symbols, dtype=float)[np.asarray(labels, dtype=int)]
        return self.sample(Z, rng)

    def sample(self, Z, rng: np.random.Generator) -> np.ndarray:
        signal, noise = self.sample_parts(Z, rng)
        return signal + noise

    def sample_parts(self, Z, rng):  # pragma: no cover - interface
        raise NotImplementedError


class AwgnChannel(Channel):
    """x = z + n with n ~ N(0, (sigma0^2/d) I)."""

    def __init__(self, sigma0: float):
        if sigma0 < 0.0:
            raise ValueError("sigma0 must be nonnegative")
        self.sigma0 = sigma0

    def sample_parts(self, Z, rng):
        Z = np.asarray(Z, dtype=float)
        d = Z.shape[1]
        noise = rng.standard_normal(Z.shape) * (self.sigma0 / np.sqrt(d))
        return Z, noise


class UniformFadingChannel(Channel):
    """x = A z + n with a scalar A ~ Unif[0, a] per draw."""

    def __init__(self, a: float, sigma0: float):
        if a <= 0.0 or sigma0 < 0.0:
            raise ValueError("need a > 0 and sigma0 >= 0")
        self.a = a
        self.sigma0 = sigma0

    def sample_parts(self, Z, rng):
        Z = np.asarray(Z, dtype=float)
        d = Z.shape[1]
        scale = rng.uniform(0.0, self.a, size=Z.shape[0])
        noise = rng.standard_normal(Z.shape) * (self.sigma0 / np.sqrt(d))
        return scale[:, None] * Z, noise


def sample_rice(nu: float, sigma_a: float, size, rng: np.random.Generator) -> np.ndarray:
    """Rice(nu, sigma_a) amplitudes via sqrt((nu + s G1)^2 + (s G2)^2)."""
    g1 = rng.standard_normal(size)
    g2 = rng.standard_normal(size)
    return np.sqrt((nu + sigma_a * g1) ** 2 + (sigma_a * g2) ** 2)


class RiceanFadingChannel(Channel):
    """x = diag(a1, a1, ..., ap, ap) z + n with a_j ~ Rice(nu, sigma_a).

    The amplitude is shared within each in-phase/quadrature pair, so the
    symbol dimension d must be even.
    """

    def __init__(self, nu: float, sigma_a: float, sigma0: float):
        if nu < 0.0 or sigma_a <= 0.0 or sigma0 < 0.0:
            raise ValueError("need nu >= 0, sigma_a > 0, sigma0 >= 0")
        self.nu = nu
        self.sigma_a = sigma_a
        self.sigma0 = sigma0

    def sample_parts(self, Z, rng):
        Z = np.asarray(Z, dtype=float)
        n, d = Z.shape
        if d % 2 != 0:
            raise ValueError("Ricean fading requires an even symbol dimension")
        amp = sample_rice(self.nu, self.sigma_a, (n, d // 2), rng)
        amp = np.repeat(amp, 2, axis=1)
        noise = rng.standard_normal(Z.shape) * (self.sigma0 / np.sqrt(d))
        return amp * Z, noise


class RandomGmmChannel(Channel):
    """Class-conditional channel: x ~ mixture of the transmitted class.

    Anchored to the constellation the mixture was built around; the live
    constellation passed to draw() does not change the output law.
    """

    is_class_conditional = True

    def __init__(self, mixture: gmm.ConditionalMixture, anchor_symbols):
        self.mixture = mixture
        self.anchor_symbols = np.asarray(anchor_symbols, dtype=float)
        if self.anchor_symbols.shape[0] != mixture.m:
            raise ValueError("anchor constellation size must match the mixture")

    def draw(self, labels, symbols, rng: np.random.Generator) -> np.ndarray:
        labels = np.asarray(labels, dtype=int)
        X, _ = gmm.sample_conditional(self.mixture, labels, rng)
        return X

    def sample(self, Z, rng):
        raise TypeError("class-conditional channel needs labels; use draw()")


def rotate_iq_pairs(X, angles) -> np.ndarray:
    """Rotate every IQ pair of each row by that row's angle."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] % 2 != 0:
        raise ValueError("phase rotation requires an even dimension")
    c = np.cos(angles)[:, None]
    s = np.sin(angles)[:, None]
    out = np.empty_like(X)
    out[:, 0::2] = c * X[:, 0::2] - s * X[:, 1::2]
    out[:, 1::2] = s * X[:, 0::2] + c * X[:, 1::2]
    return out


def iq_imbalance(X, eps: float) -> np.ndarray:
    """Simulated IQ-imbalance distortion (synthetic hardware stand-in).

    Per IQ pair: I' = (1 + eps) I and Q' = (1 - eps) cos(eps pi / 4) Q.
    This is an invented surrogate for transceiver imbalance, not a model
    of any particular hardware.
    """
    X = np.asarray(X, dtype=float)
    if X.shape[1] % 2 != 0:
        raise ValueError("IQ imbalance requires an even dimension")
    out = X.copy()
    out[:, 0::2] *= 1.0 + eps
    out[:, 1::2] *= (1.0 - eps) * np.cos(eps * np.pi / 4.0)
    return out


class CompositeChannel(Channel):
    """Base channel followed by random phase rotation and IQ imbalance.

    The rotation angle is drawn per sample from Unif[-phase_max,
    phase_max] and shared across IQ pairs.
    """

    def __init__(self, base: Channel, phase_max: float = 0.0, iq_eps: float = 0.0):
        if not 0.0 <= phase_max <= np.pi:
            raise ValueError("phase_max must be in [0, pi]")
        self.base = base
        self.phase_max = phase_max
        self.iq_eps = iq_eps

    @property
    def is_class_conditional(self):
        return self.base.is_class_conditional

    def _distort(self, X, rng):
        if self.phase_max > 0.0:
            angles = rng.uniform(-self.phase_max, self.phase_max, size=X.shape[0])
            X = rotate_iq_pairs(X, angles)
        if self.iq_eps != 0.0:
            X = iq_imbalance(X, self.iq_eps)
        return X

    def draw(self, labels, symbols, rng):
        return self._distort(self.base.draw(labels, symbols, rng), rng)

    def sample(self, Z, rng):
        return self._distort(self.base.sample(Z, rng), rng)


# ---------------------------------------------------------------------------
# random per-symbol Gaussian mixtures


def make_random_gmm_mixture(symbols, k_components: int,
                            rng: np.random.Generator) -> gmm.ConditionalMixture:
    """Random class-conditional mixture anchored at the given symbols.

    Per symbol z: sigma = d_min / 4 with d_min the minimum distance from
    z to the other symbols; priors ~ Unif(0.05, 0.95) normalized;
    component means ~ N(z, sigma^2 I); per-dimension standard deviations
    ~ Unif(0.2 sigma, sigma) shared by the symbol's components (diagonal
    covariances).
    """
    symbols = np.asarray(symbols, dtype=float)
    m, d = symbols.shape
    if m < 2:
        raise ValueError("need at least two symbols")
    dists = np.linalg.norm(symbols[:, None, :] - symbols[None, :, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    d_min = dists.min(axis=1)
    if np.any(d_min <= 0.0):
        raise ValueError("coincident symbols make d_min zero")
    logits = np.empty((m, k_components))
    means = np.empty((m, k_components, d))
    variances = np.empty((m, k_components, d))
    for s in range(m):
        sigma = d_min[s] / 4.0
        priors = rng.uniform(0.05, 0.95, size=k_components)
        priors /= priors.sum()
        logits[s] = np.log(priors)
        means[s] = symbols[s] + sigma * rng.standard_normal((k_components, d))
        stds = rng.uniform(0.2 * sigma, sigma, size=d)
        variances[s] = stds**2
    return gmm.ConditionalMixture(logits, means, variances=variances)


def make_random_gmm_channel(symbols, k_components: int,
                            rng: np.random.Generator) -> RandomGmmChannel:
    mixture = make_random_gmm_mixture(symbols, k_components, rng)
    return RandomGmmChannel(mixture, symbols)


# ---------------------------------------------------------------------------
# labeled datasets


@dataclass(frozen=True)
class LabeledSample:
    """(x, y, z): channel output, message label, transmitted symbol."""

    x: np.ndarray
    y: int
    z: np.ndarray


@dataclass
class Dataset:
    """Columnar labeled dataset; z rows always equal constellation[y]."""

    X: np.ndarray
    y: np.ndarray
    Z: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def samples(self) -> list[LabeledSample]:
        return [LabeledSample(self.X[i], int(self.y[i]), self.Z[i]) for i in range(len(self))]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return Dataset(self.X[indices], self.y[indices], self.Z[indices])


def generate_dataset(channel: Channel, constellation: gmm.SymbolConstellation,
                     n_per_class: int, rng: np.random.Generator) -> Dataset:
    """Balanced dataset with exactly n_per_class samples of every class."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    m = constellation.m
    labels = np.repeat(np.arange(m), n_per_class)
    X = channel.draw(labels, constellation.symbols, rng)
    Z = constellation.symbols[labels]
    return Dataset(X, labels, Z)


def stratified_subsample(dataset: Dataset, n_per_class: int, m: int,
                         rng: np.random.Generator) -> Dataset:
    """Class-stratified subsample with n_per_class rows per class."""
    chosen = []
    for cls in range(m):
        rows = np.flatnonzero(dataset.y == cls)
        if rows.shape[0] < n_per_class:
            raise ValueError(f"class {cls} has fewer than {n_per_class} samples")
        chosen.append(rng.choice(rows, size=n_per_class, replace=False))
    return dataset.subset(np.concatenate(chosen))


def dataset_to_csv(dataset: Dataset, path) -> None:
    d = dataset.d
    header = [f"x{j}" for j in range(d)] + ["y"] + [f"z{j}" for j in range(d)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(dataset)):
            row = [repr(v) for v in dataset.X[i]]
            row.append(str(int(dataset.y[i])))
            row.extend(repr(v) for v in dataset.Z[i])
            writer.writerow(row)


def dataset_from_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = header.index("y")
        rows = list(reader)
    X = np.array([[float(v) for v in row[:d]] for row in rows])
    y = np.array([int(row[d]) for row in rows])
    Z = np.array([[float(v) for v in row[d + 1:]] for row in rows])
    return Dataset(X, y, Z)


def dataset_to_binary(dataset: Dataset, path, meta: dict | None = None) -> None:
    """Row format: x (d f64) | y (1 f64) | z (d f64), little-endian,
    with a JSON sidecar recording shape and provenance."""
    path = Path(path)
    rows = np.hstack([dataset.X, dataset.y[:, None].astype(float), dataset.Z])
    rows.astype("<f8").tofile(path)
    sidecar = {"n": len(dataset), "d": dataset.d, "dtype": "<f8"}
    if meta:
        sidecar["meta"] = meta
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def dataset_from_binary(path) -> Dataset:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    n, d = sidecar["n"], sidecar["d"]
    rows = np.fromfile(path, dtype="<f8").reshape(n, 2 * d + 1)
    return Dataset(rows[:, :d].copy(), rows[:, d].astype(int), rows[:, d + 1:].copy())


def empirical_ebno_db(signal_power: float, noise_power: float, rate: float) -> float:
    """Eb/N0 in dB from measured signal and noise powers."""
    return linear_to_db(signal_power / (2.0 * rate * noise_power))
