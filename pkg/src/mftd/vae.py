"""Multi-channel variational auto-encoder in plain numpy.

Dense architecture::

    encoder  x (C·H·W) -> hidden -> (mu, logvar)  each of size n_latent
    decoder  z (n_latent) -> hidden -> sigmoid output (C·H·W)

The loss per sample is ``w_kl * KL + sum_c BCE_c`` where ``BCE_c`` is the
pixel-mean binary cross-entropy of channel ``c``; batch losses are averaged
over samples. Gradients are derived by hand and checked against finite
differences in the test-suite.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

CLAMP = 1e-7
PARAM_NAMES = ("W1", "b1", "Wmu", "bmu", "Wlv", "blv", "W3", "b3", "W4", "b4")
CHECKPOINT_MAGIC = "MCVAE-CHECKPOINT"


class VaeError(RuntimeError):
    pass


@dataclass
class VaeModel:
    """Weights plus layer sizes. ``params`` maps names in ``PARAM_NAMES`` to arrays."""

    channels: int
    height: int
    width: int
    hidden: int
    n_latent: int
    params: dict[str, np.ndarray]
    activation: str = "relu"
    seed: int = 0
    epoch: int = 0

    @property
    def n_input(self) -> int:
        return self.channels * self.height * self.width

    @property
    def pixels_per_channel(self) -> int:
        return self.height * self.width

    def copy(self) -> "VaeModel":
        return VaeModel(self.channels, self.height, self.width, self.hidden, self.n_latent,
                        {k: v.copy() for k, v in self.params.items()}, self.activation,
                        self.seed, self.epoch)


@dataclass
class TrainConfig:
    max_epochs: int = 300
    learning_rate: float = 1e-4
    batch_size: int = 16
    w_kl: float = 1e-3
    patience: int = 40
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        for name in ("max_epochs", "learning_rate", "batch_size", "w_kl", "patience"):
            if getattr(self, name) < 0 or (name != "w_kl" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")


@dataclass
class TrainResult:
    model: VaeModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "kl", "reconstruction"])
            for h in self.history:
                w.writerow([h["epoch"], repr(h["loss"]), repr(h["kl"]), repr(h["reconstruction"])])


def init_model(channels: int, height: int, width: int, hidden: int = 512, n_latent: int = 16,
               seed: int = 0, activation: str = "relu") -> VaeModel:
    """Glorot-uniform weights and zero biases."""
    if activation not in ("relu", "tanh"):
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    D = channels * height * width

    def glorot(n_in, n_out):
        lim = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, size=(n_in, n_out))

    params = {
        "W1": glorot(D, hidden), "b1": np.zeros(hidden),
        "Wmu": glorot(hidden, n_latent), "bmu": np.zeros(n_latent),
        "Wlv": glorot(hidden, n_latent), "blv": np.zeros(n_latent),
        "W3": glorot(n_latent, hidden), "b3": np.zeros(hidden),
        "W4": glorot(hidden, D), "b4": np.zeros(D),
    }
    return VaeModel(channels, height, width, hidden, n_latent, params, activation, seed)


def _act(model: VaeModel, a):
    return np.maximum(a, 0.0) if model.activation == "relu" else np.tanh(a)


def _act_grad(model: VaeModel, a, h):
    return (a > 0).astype(float) if model.activation == "relu" else 1.0 - h**2


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _flatten(model: VaeModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 3:
        X = X[None]
    if X.shape[1:] != (model.channels, model.height, model.width):
        raise ValueError(f"expected images of shape {(model.channels, model.height, model.width)}, "
                         f"got {X.shape[1:]}")
    return X.reshape(X.shape[0], -1)


def _check_finite(arr, layer: int):
    if not np.all(np.isfinite(arr)):
        raise VaeError(f"non-finite activation in layer {layer}")


def _encode_flat(model: VaeModel, x):
    p = model.params
    a1 = x @ p["W1"] + p["b1"]
    h1 = _act(model, a1)
    _check_finite(h1, 1)
    mu = h1 @ p["Wmu"] + p["bmu"]
    logvar = h1 @ p["Wlv"] + p["blv"]
    _check_finite(mu, 2)
    _check_finite(logvar, 2)
    return a1, h1, mu, logvar


def encode(model: VaeModel, X):
    """Return ``(mu, sigma)`` for one image ``(C, H, W)`` or a batch ``(B, C, H, W)``."""
    single = np.ndim(X) == 3
    _, _, mu, logvar = _encode_flat(model, _flatten(model, X))
    sigma = np.exp(0.5 * logvar)
    return (mu[0], sigma[0]) if single else (mu, sigma)


def reparameterize(mu, sigma, eps):
    return np.asarray(mu) + np.asarray(sigma) * np.asarray(eps)


def _decode_flat(model: VaeModel, z):
    p = model.params
    a3 = z @ p["W3"] + p["b3"]
    h3 = _act(model, a3)
    _check_finite(h3, 3)
    a4 = h3 @ p["W4"] + p["b4"]
    y = _sigmoid(a4)
    _check_finite(y, 4)
    return a3, h3, y


def decode(model: VaeModel, z) -> np.ndarray:
    """Decode latent vectors ``(n_latent,)`` or ``(B, n_latent)`` into images in (0, 1)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    _, _, y = _decode_flat(model, np.atleast_2d(z))
    imgs = y.reshape(-1, model.channels, model.height, model.width)
    return imgs[0] if single else imgs


def kl_divergence(mu, sigma) -> float:
    mu, sigma = np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
    return float(-0.5 * np.sum(1.0 + np.log(sigma**2) - mu**2 - sigma**2))


def bce_reconstruction(x, y) -> float:
    """Pixel-mean binary cross-entropy of one channel; ``y`` is clamped to [1e-7, 1-1e-7]."""
    x = np.asarray(x, dtype=float)
    y = np.clip(np.asarray(y, dtype=float), CLAMP, 1.0 - CLAMP)
    return float(-np.mean(x * np.log(y) + (1.0 - x) * np.log(1.0 - y)))


def _forward(model: VaeModel, X, eps, w_kl):
    x = _flatten(model, X)
    B = x.shape[0]
    eps = np.asarray(eps, dtype=float).reshape(B, model.n_latent)
    a1, h1, mu, logvar = _encode_flat(model, x)
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * eps
    a3, h3, y = _decode_flat(model, z)
    kl = -0.5 * np.sum(1.0 + logvar - mu**2 - np.exp(logvar), axis=1)
    yc = np.clip(y, CLAMP, 1.0 - CLAMP)
    terms = -(x * np.log(yc) + (1.0 - x) * np.log(1.0 - yc))
    recon = terms.reshape(B, model.channels, -1).mean(axis=2).sum(axis=1)
    loss = float(np.mean(w_kl * kl + recon))
    cache = dict(x=x, eps=eps, a1=a1, h1=h1, mu=mu, logvar=logvar, sigma=sigma, z=z,
                 a3=a3, h3=h3, y=y, B=B)
    return loss, float(kl.mean()), float(recon.mean()), cache


def vae_loss(model: VaeModel, X, eps, w_kl: float = 1e-3) -> float:
    """Batch-mean loss ``w_kl * KL + sum_c BCE_c`` with injected noise ``eps``."""
    return _forward(model, X, eps, w_kl)[0]


def backward(model: VaeModel, X, eps, w_kl: float = 1e-3):
    """Return ``(loss, grads)`` with ``grads`` keyed like ``model.params``."""
    loss, _, _, g = _loss_parts_and_grads(model, X, eps, w_kl)
    return loss, g


def _loss_parts_and_grads(model: VaeModel, X, eps, w_kl):
    loss, kl, rec, c = _forward(model, X, eps, w_kl)
    p = model.params
    B, x, y = c["B"], c["x"], c["y"]
    inside = (y > CLAMP) & (y < 1.0 - CLAMP)
    d_a4 = np.where(inside, y - x, 0.0) / (model.pixels_per_channel * B)
    g = {"W4": c["h3"].T @ d_a4, "b4": d_a4.sum(axis=0)}
    d_h3 = d_a4 @ p["W4"].T
    d_a3 = d_h3 * _act_grad(model, c["a3"], c["h3"])
    g["W3"] = c["z"].T @ d_a3
    g["b3"] = d_a3.sum(axis=0)
    d_z = d_a3 @ p["W3"].T
    d_mu = d_z + w_kl * c["mu"] / B
    d_lv = d_z * c["eps"] * 0.5 * c["sigma"] + w_kl * (-0.5) * (1.0 - np.exp(c["logvar"])) / B
    g["Wmu"] = c["h1"].T @ d_mu
    g["bmu"] = d_mu.sum(axis=0)
    g["Wlv"] = c["h1"].T @ d_lv
    g["blv"] = d_lv.sum(axis=0)
    d_h1 = d_mu @ p["Wmu"].T + d_lv @ p["Wlv"].T
    d_a1 = d_h1 * _act_grad(model, c["a1"], c["h1"])
    g["W1"] = x.T @ d_a1
    g["b1"] = d_a1.sum(axis=0)
    for name, arr in g.items():
        if not np.all(np.isfinite(arr)):
            raise VaeError(f"non-finite gradient in parameter block {name}")
    return loss, kl, rec, g


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-7):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for k in PARAM_NAMES:
            m, v, g = self.m[k], self.v[k], grads[k]
            tmp = np.multiply(g, 1.0 - b1)
            m *= b1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - b2
            v *= b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= lr_t
            params[k] -= tmp


def train(dataset, config: TrainConfig, model: VaeModel | None = None, hidden: int = 512,
          n_latent: int = 16, activation: str = "relu") -> TrainResult:
    """Mini-batch Adam training with early stopping on the epoch-mean loss.

    Returns the parameters from the best epoch. All randomness (initial
    weights, shuffling, noise) derives from ``config.seed``.
    """
    data = np.asarray(dataset, dtype=float)
    if data.ndim != 4 or data.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (N, C, H, W) array")
    if data.min() < 0 or data.max() > 1:
        raise ValueError("pixels must lie in [0, 1]")
    N, C, H, W = data.shape
    if model is None:
        model = init_model(C, H, W, hidden, n_latent, config.seed, activation)
    else:
        model = model.copy()
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    best, best_loss, best_epoch, stale = model.copy(), np.inf, 0, 0
    history = []
    stopped = False
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(N)
        tot = kl_tot = rec_tot = 0.0
        for start in range(0, N, config.batch_size):
            idx = order[start:start + config.batch_size]
            eps = rng.standard_normal((idx.size, model.n_latent))
            try:
                loss, kl, rec, grads = _loss_parts_and_grads(model, data[idx], eps, config.w_kl)
            except VaeError as exc:
                raise VaeError(f"training diverged at epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss):
                raise VaeError(f"loss diverged at epoch {epoch}")
            opt.step(model.params, grads)
            # weight by batch size so the epoch value is a per-sample mean
            tot += loss * idx.size
            kl_tot += kl * idx.size
            rec_tot += rec * idx.size
        epoch_loss = tot / N
        history.append(dict(epoch=epoch, loss=epoch_loss, kl=kl_tot / N, reconstruction=rec_tot / N))
        if epoch_loss < best_loss:
            best, best_loss, best_epoch, stale = model.copy(), epoch_loss, epoch, 0
            best.epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                stopped = True
                break
    log.debug("VAE training stopped at epoch %d, best %d (loss %.5g)", epoch, best_epoch, best_loss)
    return TrainResult(best, history, best_epoch, stopped)


def generate(model: VaeModel, n: int, seed) -> np.ndarray:
    """Decode ``n`` latent draws from the standard normal; shape ``(n, C, H, W)``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return decode(model, rng.standard_normal((n, model.n_latent))).reshape(
        n, model.channels, model.height, model.width)


def normalize_hf(h, h_min: float, h_max: float):
    return (np.asarray(h, dtype=float) - h_min) / (h_max - h_min)


def denormalize_hf(t, h_min: float, h_max: float):
    return h_min + np.asarray(t, dtype=float) * (h_max - h_min)


def extract_scalar_hf(image: np.ndarray, h_min: float, h_max: float, threshold: float = 0.5):
    """Masked mean of the denormalized second channel over solid pixels.

    Returns ``(h, has_solid)``; an all-void image gives ``(h_min, False)``.
    """
    image = np.asarray(image, dtype=float)
    solid = image[0] >= threshold
    if not solid.any():
        return float(h_min), False
    h = float(np.mean(denormalize_hf(image[1][solid], h_min, h_max)))
    return float(np.clip(h, h_min, h_max)), True


def oversample_indices(h_values, n_bins: int, h_min: float, h_max: float) -> np.ndarray:
    """Indices that balance equal-width bins of ``h`` by cyclic duplication.

    The original indices come first, in order; duplicates follow bin by bin.
    """
    h = np.asarray(h_values, dtype=float)
    if h.size == 0:
        raise ValueError("cannot oversample an empty dataset")
    bins = np.clip(((h - h_min) / (h_max - h_min) * n_bins).astype(int), 0, n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    target = counts.max()
    extra = []
    for b in range(n_bins):
        members = np.flatnonzero(bins == b)
        if members.size == 0:
            continue
        need = target - members.size
        extra.append(members[np.arange(need) % members.size])
    return np.concatenate([np.arange(h.size)] + extra).astype(int)


def oversample(images, h_values, n_bins: int = 4, h_min: float = 0.01, h_max: float = 0.1):
    idx = oversample_indices(h_values, n_bins, h_min, h_max)
    return np.asarray(images)[idx], np.asarray(h_values)[idx]


def save_checkpoint(path: str | os.PathLike, model: VaeModel) -> None:
    """Text header line (JSON) followed by all parameters as little-endian float64."""
    header = dict(magic=CHECKPOINT_MAGIC, channels=model.channels, height=model.height,
                  width=model.width, hidden=model.hidden, n_latent=model.n_latent,
                  activation=model.activation, seed=model.seed, epoch=model.epoch,
                  order=list(PARAM_NAMES))
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("ascii"))
        for k in PARAM_NAMES:
            fh.write(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())


def load_checkpoint(path: str | os.PathLike) -> VaeModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        blob = fh.read()
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise VaeError(f"{path} is not a model checkpoint")
    shell = init_model(header["channels"], header["height"], header["width"], header["hidden"],
                       header["n_latent"], 0, header["activation"])
    flat = np.frombuffer(blob, dtype="<f8")
    expected = sum(shell.params[k].size for k in PARAM_NAMES)
    if flat.size != expected:
        raise VaeError(f"checkpoint holds {flat.size} values, expected {expected}")
    pos = 0
    for k in PARAM_NAMES:
        n = shell.params[k].size
        shell.params[k] = flat[pos:pos + n].reshape(shell.params[k].shape).copy()
        pos += n
    shell.seed, shell.epoch = header["seed"], header["epoch"]
    return shell


def toy_dataset(n: int, size: int, relation: str, seed: int = 0, h_min: float = 0.01,
                h_max: float = 0.1):
    """Synthetic two-channel images for checking cross-channel learning.

    Channel 1 is a horizontal bar joined to a disc, both of random size.
    Channel 2 is uniform, holding the normalized scalar ``h`` that is
    proportional (``relation="proportional"``) or inversely proportional
    (``"inverse"``) to the channel-1 volume fraction. Returns ``(images, h)``.
    """
    if relation not in ("proportional", "inverse"):
        raise ValueError(f"unknown relation {relation!r}")
    rng = np.random.default_rng(seed)
    c = (np.arange(size) + 0.5) / size
    X, Y = np.meshgrid(c, c)
    dens = np.zeros((n, size, size))
    for k in range(n):
        half = rng.uniform(0.04, 0.2)
        r = rng.uniform(0.1, 0.4)
        cx, cy = rng.uniform(0.35, 0.65, 2)
        bar = np.abs(Y - cy) <= half
        disc = (X - cx) ** 2 + (Y - cy) ** 2 <= r**2
        dens[k] = (bar | disc).astype(float)
    vf = dens.mean(axis=(1, 2))
    if relation == "proportional":
        h = h_max * vf / vf.max()
    else:
        h = h_max * vf.min() / vf
    h = np.clip(h, h_min, h_max)
    chan2 = np.broadcast_to(normalize_hf(h, h_min, h_max)[:, None, None], dens.shape)
    return np.stack([dens, chan2], axis=1), h
