"""Encoder/decoder networks and end-to-end training against a channel.

The encoder maps one-hot messages to d-dimensional symbols and
normalizes the constellation to unit average power. The decoder is a
softmax classifier over messages. End-to-end training alternates between
refitting the mixture-density channel model on freshly sampled channel
data and one epoch of encoder/decoder updates with the channel model
frozen, using the smooth Gumbel-softmax transfer so gradients reach the
encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend, mdn, neural

POWER_TARGET = 1.0


def qam_constellation(m: int) -> np.ndarray:
    """Gray-coded square M-QAM points, normalized to unit average power."""
    side = int(round(np.sqrt(m)))
    if side * side != m or side < 2:
        raise ValueError("square QAM needs m to be a perfect square >= 4")
    bits = int(np.log2(side))
    if 2**bits != side:
        raise ValueError("square QAM needs m to be a power of four")
    levels = np.arange(side) * 2.0 - (side - 1)

    def gray(n: int) -> int:
        return n ^ (n >> 1)

    # label bits split into I and Q halves, each Gray mapped to a level
    order = np.argsort([gray(n) for n in range(side)])
    points = np.empty((m, 2))
    for label in range(m):
        hi, lo = divmod(label, side)
        points[label, 0] = levels[order[hi]]
        points[label, 1] = levels[order[lo]]
    points /= np.sqrt(np.mean((points**2).sum(axis=1)))
    return points


def normalize_average_power(raw: np.ndarray, c: float = POWER_TARGET):
    """Scale symbols so the uniform-prior average power equals c."""
    total = float((raw**2).sum())
    if total <= 0.0:
        raise ValueError("cannot normalize an all-zero constellation")
    scale = np.sqrt(c * raw.shape[0] / total)
    return raw * scale, scale, total


class Encoder:
    """One-hot message -> symbol network with average-power normalization."""

    def __init__(self, net: neural.FeedForwardNet, power: float = POWER_TARGET):
        self.net = net
        self.power = power

    @classmethod
    def create(cls, m: int, d: int, n_h: int, rng: np.random.Generator) -> "Encoder":
        return cls(neural.glorot_init([m, n_h, d], ["relu", "linear"], rng))

    @property
    def m(self) -> int:
        return self.net.in_dim

    @property
    def d(self) -> int:
        return self.net.out_dim

    def constellation(self) -> np.ndarray:
        """All m normalized symbols, shape (m, d)."""
        raw, _ = neural.forward_batch(self.net, np.eye(self.m))
        return normalize_average_power(raw, self.power)[0]

    def constellation_with_cache(self):
        raw, cache = neural.forward_batch(self.net, np.eye(self.m))
        symbols, scale, total = normalize_average_power(raw, self.power)
        return symbols, {"net": cache, "raw": raw, "scale": scale, "total": total}

    def encode(self, y: int) -> np.ndarray:
        if not 0 <= y < self.m:
            raise IndexError(f"label {y} out of range [0, {self.m})")
        return self.constellation()[y]

    def backward_constellation(self, dsymbols, cache):
        """Gradients of a loss in the normalized symbols w.r.t. net params."""
        raw, scale, total = cache["raw"], cache["scale"], cache["total"]
        inner = float((dsymbols * raw).sum())
        draw = scale * dsymbols - (scale / total) * inner * raw
        grads, _ = neural.backward(self.net, cache["net"], draw)
        return grads

    def copy(self) -> "Encoder":
        return Encoder(self.net.copy(), self.power)

    def to_dict(self) -> dict:
        return {"power": self.power, "net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "Encoder":
        return cls(neural.FeedForwardNet.from_dict(data["net"]), data["power"])


class Decoder:
    """Softmax classifier over the m messages."""

    def __init__(self, net: neural.FeedForwardNet):
        if net.layers[-1].activation != "softmax":
            raise ValueError("decoder must end in softmax")
        self.net = net

    @classmethod
    def create(cls, d: int, m: int, n_h: int, rng: np.random.Generator) -> "Decoder":
        return cls(neural.glorot_init([d, n_h, m], ["relu", "softmax"], rng))

    @property
    def m(self) -> int:
        return self.net.out_dim

    @property
    def d(self) -> int:
        return self.net.in_dim

    def decode(self, x):
        """Class probabilities and argmax label (lowest index on ties)."""
        probs, _ = neural.forward(self.net, x)
        return probs, int(np.argmax(probs))

    def decode_batch(self, X):
        probs, _ = neural.forward_batch(self.net, X)
        return probs, np.argmax(probs, axis=1)

    def copy(self) -> "Decoder":
        return Decoder(self.net.copy())

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "Decoder":
        return cls(neural.FeedForwardNet.from_dict(data["net"]))


@dataclass
class AutoencoderSystem:
    encoder: Encoder
    mdn_model: mdn.MdnModel
    decoder: Decoder
    message_prior: np.ndarray = None

    def __post_init__(self):
        m, d = self.encoder.m, self.encoder.d
        if self.decoder.m != m or self.decoder.d != d or self.mdn_model.d != d:
            raise ValueError("encoder, channel model and decoder dimensions disagree")
        if self.message_prior is None:
            self.message_prior = np.full(m, 1.0 / m)

    @classmethod
    def create(cls, m: int, d: int, k: int, n_h: int,
               rng: np.random.Generator) -> "AutoencoderSystem":
        return cls(Encoder.create(m, d, n_h, rng), mdn.MdnModel.create(d, k, n_h, rng),
                   Decoder.create(d, m, n_h, rng))

    @property
    def m(self) -> int:
        return self.encoder.m

    def constellation(self) -> np.ndarray:
        return self.encoder.constellation()

    def classifier(self):
        """Plain decoder classifier (no input transformation)."""
        return lambda X: self.decoder.decode_batch(X)[1]

    def copy(self) -> "AutoencoderSystem":
        return AutoencoderSystem(self.encoder.copy(), self.mdn_model.copy(),
                                 self.decoder.copy(), self.message_prior.copy())

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "mdn": self.mdn_model.to_dict(),
            "decoder": self.decoder.to_dict(),
            "message_prior": self.message_prior.tolist(),
            "constellation": self.constellation().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AutoencoderSystem":
        return cls(Encoder.from_dict(data["encoder"]), mdn.MdnModel.from_dict(data["mdn"]),
                   Decoder.from_dict(data["decoder"]), np.array(data["message_prior"]))


def _decoder_ce_backward(decoder: Decoder, cache, probs, labels):
    """Cross-entropy backward using the softmax composite (probs - onehot)/N."""
    n = probs.shape[0]
    dpre = probs.copy()
    dpre[np.arange(n), labels] -= 1.0
    dpre /= n
    grads = [None] * (2 * len(decoder.net.layers))
    dY = dpre
    for li in range(len(decoder.net.layers) - 1, -1, -1):
        layer = decoder.net.layers[li]
        X, pre, out = cache[li]
        if li == len(decoder.net.layers) - 1:
            act = backend.LINEAR  # composite already folded the softmax in
        else:
            act = backend.ACTIVATION_CODES[layer.activation]
        dY, dW, db = backend.dense_backward(dY, X, layer.weights, pre, out, act)
        grads[2 * li] = dW
        grads[2 * li + 1] = db
    return grads, dY


def ce_loss_and_grad(system: AutoencoderSystem, labels, gumbel, u,
                     tau: float = mdn.DEFAULT_TAU):
    """Cross-entropy through the smooth channel; gradients for encoder/decoder.

    The channel model parameters stay frozen, but the gradient flows
    through its predictions back to the encoder symbols. gumbel (N, k)
    and u (N, d) carry the externally drawn channel randomness.
    Returns (loss, encoder_grads, decoder_grads).
    """
    labels = np.asarray(labels, dtype=int)
    n = labels.shape[0]
    model = system.mdn_model

    symbols, enc_cache = system.encoder.constellation_with_cache()
    means, variances, logits, mdn_caches = model.predict_arrays(symbols)
    x_hat, transfer_cache = mdn.differentiable_transfer(
        means[labels], variances[labels], logits[labels], gumbel, u, tau
    )
    probs, dec_cache = neural.forward_batch(system.decoder.net, x_hat)

    picked = np.maximum(probs[np.arange(n), labels], 1e-300)
    loss = float(-np.mean(np.log(picked)))

    dec_grads, dx_hat = _decoder_ce_backward(system.decoder, dec_cache, probs, labels)
    dmu_n, dvar_n, dlog_n = mdn.differentiable_transfer_backward(dx_hat, transfer_cache)

    m = system.m
    onehot = np.zeros((m, n))
    onehot[labels, np.arange(n)] = 1.0
    k, d = model.k, model.d
    dmeans = (onehot @ dmu_n.reshape(n, k * d)).reshape(m, k, d)
    dvariances = (onehot @ dvar_n.reshape(n, k * d)).reshape(m, k, d)
    dlogits = onehot @ dlog_n

    _, dhidden = mdn._head_backward(model, mdn_caches, dmeans, dvariances, dlogits)
    _, dsymbols = neural.backward(model.trunk, mdn_caches["trunk"], dhidden)
    enc_grads = system.encoder.backward_constellation(dsymbols, enc_cache)
    return loss, enc_grads, dec_grads


@dataclass
class TrainingHistory:
    ce_loss: list = field(default_factory=list)
    mdn_loss: list = field(default_factory=list)
    rounds: int = 0


def train_autoencoder(system: AutoencoderSystem, channel, n_ae: int = 50, n_ce: int = 20,
                      mdn_samples_per_round: int = 20000,
                      encdec_draws_per_round: int = 300000,
                      batch_size: int = 128, mdn_lr: float = 0.001,
                      lr_start: float = 0.1, lr_end: float = 0.005,
                      tau: float = mdn.DEFAULT_TAU,
                      initial_constellation: np.ndarray | None = None,
                      rng: np.random.Generator | None = None) -> TrainingHistory:
    """Alternating end-to-end training; mutates the system in place.

    The channel model is first fit on data collected with the initial
    constellation (square QAM when available). Each round then runs one
    epoch of encoder/decoder updates with the channel model frozen,
    followed by refitting the channel model on fresh data sampled under
    the updated constellation. SGD with Nesterov momentum and an
    exponential learning-rate schedule drives the encoder/decoder.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    m, d, k = system.m, system.encoder.d, system.mdn_model.k
    if initial_constellation is None:
        try:
            initial_constellation = qam_constellation(m)
        except ValueError:
            initial_constellation = system.constellation()
    if initial_constellation.shape != (m, d):
        raise ValueError("initial constellation has the wrong shape")

    history = TrainingHistory(rounds=n_ae)
    per_class = max(1, mdn_samples_per_round // m)

    def fit_channel(symbols):
        labels = np.repeat(np.arange(m), per_class)
        X = channel.draw(labels, symbols, rng)
        trace = mdn.train_mdn(system.mdn_model, symbols[labels], X, epochs=n_ce,
                              lr=mdn_lr, batch_size=batch_size, rng=rng)
        history.mdn_loss.append(trace[-1] if trace else float("nan"))

    fit_channel(np.asarray(initial_constellation, dtype=float))

    enc_params = system.encoder.net.parameters()
    dec_params = system.decoder.net.parameters()
    opt = neural.NesterovState(enc_params + dec_params, lr=lr_start)
    schedule = neural.exponential_lr(lr_start, lr_end, n_ae)

    for rnd in range(n_ae):
        opt.lr = schedule(rnd)
        total = 0.0
        steps = 0
        for start in range(0, encdec_draws_per_round, batch_size):
            nb = min(batch_size, encdec_draws_per_round - start)
            labels = rng.integers(0, m, size=nb)
            g = mdn.gumbel_noise(rng, (nb, k))
            u = rng.standard_normal((nb, d))
            loss, enc_grads, dec_grads = ce_loss_and_grad(system, labels, g, u, tau)
            neural.optimizer_step(opt, enc_params + dec_params, enc_grads + dec_grads)
            total += loss
            steps += 1
        history.ce_loss.append(total / max(steps, 1))
        fit_channel(system.constellation())
    return history


@dataclass
class SerResult:
    ser: float
    n_test: int
    confusion: np.ndarray

    def to_dict(self, seed=None) -> dict:
        out = {"n_test": self.n_test, "ser": self.ser, "confusion": self.confusion.tolist()}
        if seed is not None:
            out["seed"] = seed
        return out


def evaluate_ser(classifier, channel, constellation, n_test: int,
                 rng: np.random.Generator, batch: int = 8192) -> SerResult:
    """Monte-Carlo symbol error rate over uniform labels.

    classifier is a callable mapping a batch of channel outputs to
    predicted labels; channel.draw supplies fresh samples.
    """
    if n_test < 1:
        raise ValueError("n_test must be at least 1")
    symbols = np.asarray(constellation, dtype=float)
    m = symbols.shape[0]
    confusion = np.zeros((m, m), dtype=np.int64)
    errors = 0
    done = 0
    while done < n_test:
        nb = min(batch, n_test - done)
        labels = rng.integers(0, m, size=nb)
        X = channel.draw(labels, symbols, rng)
        pred = np.asarray(classifier(X), dtype=int)
        errors += int((pred != labels).sum())
        np.add.at(confusion, (labels, pred), 1)
        done += nb
    return SerResult(errors / n_test, n_test, confusion)


def ser_on_dataset(classifier, X, labels, m: int, batch: int = 8192) -> SerResult:
    """Symbol error rate of a classifier on a fixed labeled dataset."""
    labels = np.asarray(labels, dtype=int)
    confusion = np.zeros((m, m), dtype=np.int64)
    errors = 0
    for start in range(0, labels.shape[0], batch):
        sl = slice(start, start + batch)
        pred = np.asarray(classifier(X[sl]), dtype=int)
        errors += int((pred != labels[sl]).sum())
        np.add.at(confusion, (labels[sl], pred), 1)
    return SerResult(errors / labels.shape[0], labels.shape[0], confusion)
