"""Per-device task-relevant feature extraction with a variational information bottleneck."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import MLP, OptimizerState, ParamStore, Tensor, cross_entropy, mean, no_grad, record, softplus
from .training import run_steps
from .data import minibatch_stream


@dataclass
class VibConfig:
    gamma: float = 1e-4
    batch_size: int = 128
    steps: int = 4000
    lr: float = 1e-3
    samples: int = 1  # Monte Carlo draws of z per example
    seed: int = 0
    feature_dim: int = 64
    hidden: tuple[int, ...] = (256, 256)
    decoder_hidden: tuple[int, ...] = (256,)

    def __post_init__(self):
        if self.gamma < 0 or self.batch_size < 1 or self.samples < 1:
            raise ValueError("VibConfig needs gamma >= 0, batch_size >= 1, samples >= 1")
        self.hidden = tuple(self.hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)


class VibModel:
    """Gaussian encoder p(z|x) plus the variational classifier q(y|z) for one device.

    The encoder trunk emits 2*d values; the first d are the mean, the last d go
    through softplus to give the standard deviation.
    """

    def __init__(self, in_dim: int, num_classes: int, cfg: VibConfig, device_index: int = 0,
                 store: ParamStore | None = None):
        self.cfg = cfg
        self.device_index = device_index
        self.prefix = f"vib/k{device_index}"
        self.store = store if store is not None else ParamStore()
        self.in_dim, self.num_classes = in_dim, num_classes
        rng = np.random.default_rng([cfg.seed, device_index, 0])
        d = cfg.feature_dim
        self.encoder = MLP(self.store, f"{self.prefix}/enc", [in_dim, *cfg.hidden, 2 * d], rng)
        self.decoder = MLP(self.store, f"{self.prefix}/dec", [d, *cfg.decoder_hidden, num_classes], rng)
        self.trained = False

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def features(self, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Deterministic features (the posterior mean) for downstream coding."""
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        out = []
        with no_grad():
            for lo in range(0, len(x), chunk):
                mu, _ = encode_gaussian(Tensor(x[lo : lo + chunk]), self)
                out.append(mu.data)
        return np.concatenate(out) if out else np.zeros((0, self.feature_dim))


def encode_gaussian(x: Tensor, model: VibModel) -> tuple[Tensor, Tensor]:
    if x.shape[-1] != model.in_dim:
        raise ValueError(f"expected input width {model.in_dim}, got {x.shape[-1]}")
    h = model.encoder(x)
    d = model.feature_dim
    return h[..., :d], softplus(h[..., d:])


def reparameterize(mu: Tensor, sigma: Tensor, eps) -> Tensor:
    eps = np.asarray(eps, dtype=np.float64)
    if mu.shape != sigma.shape or mu.shape != eps.shape:
        raise ValueError("mu, sigma and eps must share a shape")
    return mu + sigma * eps


def kl_std_normal(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)) in nats, summed over the last axis."""
    if np.any(sigma.data <= 0):
        raise ValueError("sigma must be strictly positive")
    m, s = mu.data, sigma.data
    value = (0.5 * (m * m + s * s - 1.0) - np.log(s)).sum(axis=-1)

    def backward(g):
        g = np.expand_dims(g, -1)
        return g * m, g * (s - 1.0 / s)

    return record(value, (mu, sigma), backward)


def vib_loss(model: VibModel, x, labels, gamma: float, eps) -> Tensor:
    """Minibatch VIB estimate: mean over examples of CE(q(y|z)) + gamma * KL.

    ``eps`` has shape [L, M, d] (or [M, d] for L = 1); the CE is averaged over the L draws.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty batch")
    x = x if isinstance(x, Tensor) else Tensor(x)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim == 2:
        eps = eps[None]
    mu, sigma = encode_gaussian(x, model)
    ce = None
    for draw in eps:
        z = reparameterize(mu, sigma, draw)
        term = cross_entropy(model.decoder(z), labels)
        ce = term if ce is None else ce + term
    ce = ce * (1.0 / len(eps))
    if gamma == 0:
        return mean(ce)
    return mean(ce + gamma * kl_std_normal(mu, sigma))


def train_vib(views: np.ndarray, labels: np.ndarray, cfg: VibConfig, device_index: int = 0,
              num_classes: int = 10) -> tuple[VibModel, list[float]]:
    """Train one device's extractor; devices are independent and can be trained in any order."""
    x = np.asarray(views, dtype=np.float64).reshape(len(views), -1)
    labels = np.asarray(labels)
    if len(x) == 0:
        raise ValueError("empty training set")
    model = VibModel(x.shape[1], num_classes, cfg, device_index)
    noise = np.random.default_rng([cfg.seed, device_index, 1])
    stream = minibatch_stream(len(x), cfg.batch_size, seed=cfg.seed * 1000 + device_index)
    opt = OptimizerState("adam", lr=cfg.lr)

    def step_loss(_step):
        idx = next(stream)
        eps = noise.standard_normal((cfg.samples, len(idx), cfg.feature_dim))
        return vib_loss(model, x[idx], labels[idx], cfg.gamma, eps)

    trace = run_steps(model.store, model.prefix, step_loss, cfg.steps, opt, label=f"vib/k{device_index}")
    model.trained = True
    return model, trace
