"""End-to-end baseline: Gaussian encoders and quantized coders trained jointly on raw views.

The layer structure matches the two-stage pipeline (extractor trunk, coder,
joint and auxiliary predictors); only the training differs. There is no
separate extraction stage: the sampled features feed the coders directly and
the KL regularizer is added to the distributed coding objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import minibatch_stream
from .nn import MLP, OptimizerState, ParamStore, Tensor, concat, no_grad, softplus, tanh
from .quantize import QuantizerSpec, quantize_ste
from .training import run_steps
from .vddib import vddib_loss
from .vib import kl_std_normal, reparameterize


@dataclass
class DvibConfig:
    gamma: float = 1e-4
    beta: float = 0.01
    n: Sequence[int] = (1, 1)
    d: Sequence[int] = (5, 5)
    feature_dim: int = 64
    hidden: tuple[int, ...] = (256, 256)
    encoder_hidden: tuple[int, ...] = (256,)
    joint_hidden: tuple[int, ...] = (256, 256)
    aux_hidden: tuple[int, ...] = (128,)
    batch_size: int = 128
    steps: int = 8000
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if len(self.n) != len(self.d):
            raise ValueError("n and d need one entry per device")
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("gamma and beta must be nonnegative")
        self.n, self.d = tuple(int(v) for v in self.n), tuple(int(v) for v in self.d)
        for name in ("hidden", "encoder_hidden", "joint_hidden", "aux_hidden"):
            setattr(self, name, tuple(getattr(self, name)))

    @property
    def specs(self) -> list[QuantizerSpec]:
        return [QuantizerSpec(n, d) for n, d in zip(self.n, self.d)]

    @property
    def total_bits(self) -> int:
        return sum(s.bit_cost for s in self.specs)


class DvibModel:
    def __init__(self, in_dims: Sequence[int], num_classes: int, cfg: DvibConfig, prefix: str = "dvib"):
        self.cfg = cfg
        self.prefix = prefix
        self.store = ParamStore()
        self.specs = cfg.specs
        self.in_dims = tuple(in_dims)
        self.num_classes = num_classes
        self.total_bits = cfg.total_bits
        rng = np.random.default_rng([cfg.seed, 4])
        fd = cfg.feature_dim
        self.trunks = [MLP(self.store, f"{prefix}/trunk/k{k}", [i, *cfg.hidden, 2 * fd], rng) for k, i in enumerate(in_dims)]
        self.encoders = [MLP(self.store, f"{prefix}/enc/k{k}", [fd, *cfg.encoder_hidden, s.d], rng)
                         for k, s in enumerate(self.specs)]
        self.joint = MLP(self.store, f"{prefix}/joint", [sum(s.d for s in self.specs), *cfg.joint_hidden, num_classes], rng)
        self.aux = [MLP(self.store, f"{prefix}/aux/k{k}", [s.d, *cfg.aux_hidden, num_classes], rng)
                    for k, s in enumerate(self.specs)]
        self.trained = False

    @property
    def K(self) -> int:
        return len(self.specs)

    def gaussian(self, x, k: int) -> tuple[Tensor, Tensor]:
        h = self.trunks[k](x if isinstance(x, Tensor) else Tensor(x))
        fd = self.cfg.feature_dim
        return h[..., :fd], softplus(h[..., fd:])

    def code(self, z: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
        return quantize_ste(tanh(self.encoders[k](z)), self.specs[k].n)

    def loss(self, xs: Sequence[np.ndarray], labels, eps: Sequence[np.ndarray]) -> Tensor:
        codes, kl = [], None
        for k, x in enumerate(xs):
            mu, sigma = self.gaussian(x, k)
            codes.append(self.code(reparameterize(mu, sigma, eps[k]), k)[0])
            term = kl_std_normal(mu, sigma).mean()
            kl = term if kl is None else kl + term
        parts = vddib_loss(codes, labels, self.joint, self.aux, self.cfg.beta, self.specs)
        return parts.total + self.cfg.gamma * kl

    def codes(self, xs: Sequence[np.ndarray]) -> list[tuple[Tensor, np.ndarray]]:
        """Inference codes from the posterior means."""
        with no_grad():
            return [self.code(self.gaussian(np.asarray(x, dtype=np.float64), k)[0], k) for k, x in enumerate(xs)]

    def predict_logits(self, xs: Sequence[np.ndarray], chunk: int = 8192) -> np.ndarray:
        n = len(xs[0])
        out = []
        with no_grad():
            for lo in range(0, n, chunk):
                codes = self.codes([x[lo : lo + chunk] for x in xs])
                out.append(self.joint(concat([c[0] for c in codes])).data)
        return np.concatenate(out)

    def aux_logits(self, xs: Sequence[np.ndarray]) -> list[np.ndarray]:
        with no_grad():
            return [self.aux[k](c[0]).data for k, c in enumerate(self.codes(xs))]


def train_dvib(views: Sequence[np.ndarray], labels: np.ndarray, cfg: DvibConfig,
               num_classes: int = 10) -> tuple[DvibModel, list[float]]:
    xs = [np.asarray(v, dtype=np.float64).reshape(len(v), -1) for v in views]
    labels = np.asarray(labels)
    model = DvibModel([x.shape[1] for x in xs], num_classes, cfg)
    noise = np.random.default_rng([cfg.seed, 5])
    stream = minibatch_stream(len(labels), cfg.batch_size, seed=cfg.seed * 1000 + 41)
    opt = OptimizerState("adam", lr=cfg.lr)

    def step_loss(_step):
        idx = next(stream)
        eps = [noise.standard_normal((len(idx), cfg.feature_dim)) for _ in xs]
        return model.loss([x[idx] for x in xs], labels[idx], eps)

    trace = run_steps(model.store, model.prefix, step_loss, cfg.steps, opt, label="dvib")
    model.trained = True
    return model, trace
