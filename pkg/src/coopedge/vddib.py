"""Distributed quantized feature encoding trained with the variational distributed
deterministic information bottleneck objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .data import minibatch_stream
from .nn import LN2, MLP, OptimizerState, ParamStore, Tensor, concat, cross_entropy, mean, no_grad, tanh
from .quantize import QuantizedCode, QuantizerSpec, quantize_ste
from .training import run_steps


@dataclass
class VddibConfig:
    beta: float = 0.01
    n: Sequence[int] = (1, 1)  # bits per dimension, one entry per device
    d: Sequence[int] = (5, 5)  # code dimensions, one entry per device
    batch_size: int = 128
    steps: int = 8000
    lr: float = 1e-3
    seed: int = 0
    encoder_hidden: tuple[int, ...] = (256,)
    joint_hidden: tuple[int, ...] = (256, 256)
    aux_hidden: tuple[int, ...] = (128,)

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if len(self.n) != len(self.d):
            raise ValueError("n and d need one entry per device")
        self.n, self.d = tuple(int(v) for v in self.n), tuple(int(v) for v in self.d)
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.joint_hidden = tuple(self.joint_hidden)
        self.aux_hidden = tuple(self.aux_hidden)

    @property
    def specs(self) -> list[QuantizerSpec]:
        return [QuantizerSpec(n, d) for n, d in zip(self.n, self.d)]

    @property
    def total_bits(self) -> int:
        return sum(s.bit_cost for s in self.specs)


class LossParts(NamedTuple):
    total: Tensor
    joint_ce: float
    aux_ce: list[float]
    rate_bits: float


class VddibModel:
    """Per-device encoders f_k, the joint server predictor and per-device auxiliary predictors."""

    def __init__(self, feature_dims: Sequence[int], num_classes: int, cfg: VddibConfig,
                 store: ParamStore | None = None, prefix: str = "vddib"):
        if len(feature_dims) != len(cfg.n):
            raise ValueError("one quantizer spec per device is required")
        self.cfg = cfg
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()
        self.specs = cfg.specs
        self.feature_dims = tuple(feature_dims)
        self.num_classes = num_classes
        rng = np.random.default_rng([cfg.seed, 2])
        self.encoders = [
            MLP(self.store, f"{prefix}/enc/k{k}", [fd, *cfg.encoder_hidden, s.d], rng)
            for k, (fd, s) in enumerate(zip(feature_dims, self.specs))
        ]
        self.joint = MLP(self.store, f"{prefix}/joint", [sum(s.d for s in self.specs), *cfg.joint_hidden, num_classes], rng)
        self.aux = [
            MLP(self.store, f"{prefix}/aux/k{k}", [s.d, *cfg.aux_hidden, num_classes], rng)
            for k, s in enumerate(self.specs)
        ]
        self.trained = False

    @property
    def K(self) -> int:
        return len(self.specs)

    def encode(self, z, k: int) -> tuple[Tensor, np.ndarray]:
        """Differentiable device-k encoding: quantize(tanh(f_k(z))). Returns (levels, indices)."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.shape[-1] != self.feature_dims[k]:
            raise ValueError(f"device {k}: expected feature width {self.feature_dims[k]}, got {z.shape[-1]}")
        return quantize_ste(tanh(self.encoders[k](z)), self.specs[k].n)

    def loss(self, zs: Sequence, labels, beta: float | None = None) -> LossParts:
        codes = [self.encode(z, k)[0] for k, z in enumerate(zs)]
        return vddib_loss(codes, labels, self.joint, self.aux, self.cfg.beta if beta is None else beta, self.specs)

    def predict_logits(self, zs: Sequence[np.ndarray], chunk: int = 8192) -> np.ndarray:
        n = len(zs[0])
        out = []
        with no_grad():
            for lo in range(0, n, chunk):
                codes = [self.encode(z[lo : lo + chunk], k)[0] for k, z in enumerate(zs)]
                out.append(self.joint(concat(codes)).data)
        return np.concatenate(out)

    def codes(self, zs: Sequence[np.ndarray]) -> list[QuantizedCode]:
        with no_grad():
            out = []
            for k, z in enumerate(zs):
                deq, idx = self.encode(z, k)
                out.append(QuantizedCode(idx, deq.data, self.specs[k].n))
        return out

    def aux_logits(self, codes: Sequence[QuantizedCode]) -> list[np.ndarray]:
        with no_grad():
            return [self.aux[k](Tensor(c.dequantized)).data for k, c in enumerate(codes)]


def encode_device(z, model: VddibModel, k: int) -> QuantizedCode:
    """Inference-time encoding of one device's feature (vector or batch)."""
    with no_grad():
        deq, idx = model.encode(z, k)
    return QuantizedCode(idx, deq.data, model.specs[k].n)


def vddib_loss(codes: Sequence[Tensor], labels, joint: MLP, aux: Sequence[MLP], beta: float,
               specs: Sequence[QuantizerSpec]) -> LossParts:
    """Minibatch estimate: mean of CE(joint(u_1..u_K)) + beta * sum_k [CE(aux_k(u_k)) + R_bit(u_k) ln 2].

    The rate term is constant for fixed (n_k, d_k); it is included so that the
    value reproduces the objective, and carries no gradient.
    """
    if len(codes) != len(specs) or any(c is None for c in codes):
        raise ValueError("a code is required for every device")
    labels = np.asarray(labels)
    joint_ce = mean(cross_entropy(joint(concat(list(codes))), labels))
    rate_bits = float(sum(s.n * s.d for s in specs))
    aux_ce = [mean(cross_entropy(a(c), labels)) for a, c in zip(aux, codes)]
    aux_sum = aux_ce[0]
    for t in aux_ce[1:]:
        aux_sum = aux_sum + t
    total = joint_ce + beta * (aux_sum + rate_bits * LN2)
    return LossParts(total, float(joint_ce.data), [float(t.data) for t in aux_ce], rate_bits)


def train_vddib(features: Sequence[np.ndarray], labels: np.ndarray, cfg: VddibConfig,
                num_classes: int = 10) -> tuple[VddibModel, list[float]]:
    """Train coders on frozen extractor features (posterior means, one array per device)."""
    zs = [np.asarray(f, dtype=np.float64) for f in features]
    labels = np.asarray(labels)
    model = VddibModel([z.shape[1] for z in zs], num_classes, cfg)
    stream = minibatch_stream(len(labels), cfg.batch_size, seed=cfg.seed * 1000 + 17)
    opt = OptimizerState("adam", lr=cfg.lr)

    def step_loss(_step):
        idx = next(stream)
        return model.loss([z[idx] for z in zs], labels[idx]).total

    trace = run_steps(model.store, model.prefix, step_loss, cfg.steps, opt, label="vddib")
    model.trained = True
    return model, trace
