"""Selective retransmission: chunked codes over T rounds, per-round internal predictors,
attention-gated device activation, and the multi-round training objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import minibatch_stream
from .nn import LN2, MLP, OptimizerState, ParamStore, Tensor, concat, cross_entropy, mean, no_grad, record, softmax_np, tanh
from .quantize import QuantizedCode, QuantizerSpec, quantize_backward, quantize_ste
from .training import run_steps
from .vddib import VddibConfig, VddibModel


@dataclass
class SrConfig:
    T: int = 2
    beta: float = 0.01
    delta0: float = 0.9  # inference only
    n: Sequence[int] = (1, 1)
    d_chunk: Sequence[int] = (4, 4)
    batch_size: int = 128
    steps: int = 8000
    lr: float = 1e-3
    seed: int = 0
    encoder_hidden: tuple[int, ...] = (256,)
    pred_hidden: tuple[int, ...] = (256, 256)
    aux_hidden: tuple[int, ...] = (128,)
    gate_hidden: tuple[int, ...] = (64,)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if len(self.n) != len(self.d_chunk):
            raise ValueError("n and d_chunk need one entry per device")
        self.n, self.d_chunk = tuple(int(v) for v in self.n), tuple(int(v) for v in self.d_chunk)
        for name in ("encoder_hidden", "pred_hidden", "aux_hidden", "gate_hidden"):
            setattr(self, name, tuple(getattr(self, name)))

    @property
    def chunk_specs(self) -> list[QuantizerSpec]:
        return [QuantizerSpec(n, d) for n, d in zip(self.n, self.d_chunk)]

    @property
    def max_bits(self) -> int:
        return self.T * sum(s.bit_cost for s in self.chunk_specs)


@dataclass
class SrRoundState:
    tau: int
    attention: np.ndarray  # [K] of {0, 1}
    gated: list[np.ndarray]  # K dequantized chunks, zeros where inactive
    cumulative_bits: int
    confidence: float | None = None  # absent for the last round


@dataclass
class SrForward:
    """Everything one training/evaluation pass over all T rounds produces."""

    codes: list[Tensor]  # full dequantized u_k
    indices: list[np.ndarray]
    attention: list[Tensor]  # per round, [B, K]; round 1 is constant ones
    gate_scores: list[Tensor | None]  # pre-activations s per round, [B, K]; None for round 1
    gated: list[list[Tensor]]  # [round][device] -> [B, d_chunk]
    logits: list[Tensor]  # per round, [B, C]


def binarize_ste(s: Tensor) -> Tensor:
    """Hard threshold at zero (inclusive) with a clipped-identity surrogate gradient."""
    return record((s.data >= 0).astype(np.float64), (s,), lambda g: (quantize_backward(g, s.data),))


def gate(a, u):
    """Scale a dequantized chunk by the binary attention score."""
    return a * u


def confidence(probabilities) -> float | np.ndarray:
    """Maximum predicted probability (per row for a batch)."""
    p = np.asarray(probabilities, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("confidence expects normalized probabilities")
    return p.max(axis=-1)


class SrModel:
    def __init__(self, feature_dims: Sequence[int], num_classes: int, cfg: SrConfig,
                 store: ParamStore | None = None, prefix: str = "sr"):
        if len(feature_dims) != len(cfg.n):
            raise ValueError("one chunk spec per device is required")
        self.cfg = cfg
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()
        self.T = cfg.T
        self.chunk_specs = cfg.chunk_specs
        self.feature_dims = tuple(feature_dims)
        self.num_classes = num_classes
        rng = np.random.default_rng([cfg.seed, 3])
        T, dcs = cfg.T, cfg.d_chunk
        width = sum(dcs)
        self.encoders = [
            MLP(self.store, f"{prefix}/enc/k{k}", [fd, *cfg.encoder_hidden, T * dc], rng)
            for k, (fd, dc) in enumerate(zip(feature_dims, dcs))
        ]
        self.predictors = [
            MLP(self.store, f"{prefix}/pred/t{tau}", [tau * width, *cfg.pred_hidden, num_classes], rng)
            for tau in range(1, T + 1)
        ]
        self.aux = [
            MLP(self.store, f"{prefix}/aux/k{k}", [T * dc, *cfg.aux_hidden, num_classes], rng)
            for k, dc in enumerate(dcs)
        ]
        # gates[tau - 2][k] decides device k's activity in round tau
        self.gates = [
            [MLP(self.store, f"{prefix}/gate/k{k}/t{tau}", [(tau - 1) * width, *cfg.gate_hidden, 1], rng)
             for k in range(len(dcs))]
            for tau in range(2, T + 1)
        ]
        self.trained = False

    @property
    def K(self) -> int:
        return len(self.chunk_specs)

    @classmethod
    def from_vddib(cls, model: VddibModel) -> SrModel:
        """The single-round model with the same parameters as a VDDIB coder."""
        c: VddibConfig = model.cfg
        cfg = SrConfig(T=1, beta=c.beta, n=c.n, d_chunk=c.d, seed=c.seed, encoder_hidden=c.encoder_hidden,
                       pred_hidden=c.joint_hidden, aux_hidden=c.aux_hidden)
        sr = cls(model.feature_dims, model.num_classes, cfg)
        renames = {f"{model.prefix}/joint/": f"{sr.prefix}/pred/t1/", f"{model.prefix}/": f"{sr.prefix}/"}
        state = {}
        for name, value in model.store.state_dict(model.prefix + "/").items():
            for old, new in renames.items():
                if name.startswith(old):
                    state[new + name[len(old):]] = value
                    break
        sr.store.load_state_dict(state)
        sr.trained = model.trained
        return sr

    # ------------------------------------------------------------ device side
    def encode(self, z, k: int) -> tuple[Tensor, np.ndarray]:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.shape[-1] != self.feature_dims[k]:
            raise ValueError(f"device {k}: expected feature width {self.feature_dims[k]}, got {z.shape[-1]}")
        return quantize_ste(tanh(self.encoders[k](z)), self.chunk_specs[k].n)

    def chunk(self, u: Tensor, k: int, tau: int) -> Tensor:
        dc = self.chunk_specs[k].d
        return u[..., (tau - 1) * dc : tau * dc]

    # ------------------------------------------------------------ server side
    def attention_scores(self, received: Sequence[Sequence[Tensor]], tau: int) -> tuple[Tensor, Tensor]:
        """Binary activations for round ``tau`` from the gated chunks of rounds 1..tau-1.

        Returns (a, s), both [B, K]: the {0, 1} scores and their pre-activations.
        """
        if tau < 2:
            raise ValueError("round 1 is unconditionally all-active; gates start at round 2")
        if len(received) != tau - 1:
            raise ValueError(f"round {tau} gates need {tau - 1} received rounds, got {len(received)}")
        inp = concat([u for rnd in received for u in rnd])
        s = concat([g(inp) for g in self.gates[tau - 2]])
        return binarize_ste(s), s

    def forward(self, zs: Sequence, force_open: bool = False) -> SrForward:
        K, T = self.K, self.T
        encoded = [self.encode(z, k) for k, z in enumerate(zs)]
        codes = [e[0] for e in encoded]
        batch = codes[0].shape[:-1]
        ones = Tensor(np.ones(batch + (K,)))
        attention, scores, gated, logits = [ones], [None], [], []
        for tau in range(1, T + 1):
            if tau > 1:
                if force_open:
                    a, s = ones, None
                else:
                    a, s = self.attention_scores(gated, tau)
                attention.append(a)
                scores.append(s)
            a = attention[-1]
            gated.append([gate(a[..., k : k + 1], self.chunk(codes[k], k, tau)) if tau > 1
                          else self.chunk(codes[k], k, tau) for k in range(K)])
            logits.append(self.predictors[tau - 1](concat([u for rnd in gated for u in rnd])))
        return SrForward(codes, [e[1] for e in encoded], attention, scores, gated, logits)

    def loss(self, zs: Sequence, labels, beta: float | None = None, force_open: bool = False) -> Tensor:
        fwd = self.forward(zs, force_open=force_open)
        return vddib_sr_loss(fwd, labels, self.aux, self.cfg.beta if beta is None else beta, self.chunk_specs)

    # -------------------------------------------------------------- inference
    def round_probabilities(self, received: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
        """Class probabilities of the internal predictor for round len(received)."""
        tau = len(received)
        if not 1 <= tau <= self.T:
            raise ValueError(f"between 1 and {self.T} rounds expected, got {tau}")
        with no_grad():
            logits = self.predictors[tau - 1](concat([Tensor(u) for rnd in received for u in rnd]))
        return softmax_np(logits.data)

    def round_attention(self, received: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
        """Binary activations for round len(received) + 1."""
        with no_grad():
            a, _ = self.attention_scores([[Tensor(u) for u in rnd] for rnd in received], len(received) + 1)
        return a.data

    def run_all_rounds(self, zs: Sequence[np.ndarray], chunk: int = 8192) -> dict[str, np.ndarray]:
        """Evaluate every round for a batch (no stopping); rounds never depend on the threshold.

        Returns probabilities [T, N, C], attention [T, N, K] and code indices per device.
        """
        n = len(zs[0])
        probs, att, idx = [], [], [[] for _ in range(self.K)]
        with no_grad():
            for lo in range(0, n, chunk):
                fwd = self.forward([z[lo : lo + chunk] for z in zs])
                probs.append(np.stack([softmax_np(l.data) for l in fwd.logits]))
                att.append(np.stack([a.data for a in fwd.attention]))
                for k in range(self.K):
                    idx[k].append(fwd.indices[k])
        return {
            "probs": np.concatenate(probs, axis=1),
            "attention": np.concatenate(att, axis=1),
            "indices": [np.concatenate(i) for i in idx],
        }


def chunk_code(z, model: SrModel, k: int) -> list[QuantizedCode]:
    """Encode device k's feature and split the code into T contiguous chunks."""
    with no_grad():
        deq, idx = model.encode(z, k)
    dc, n = model.chunk_specs[k].d, model.chunk_specs[k].n
    return [QuantizedCode(idx[..., t * dc : (t + 1) * dc], deq.data[..., t * dc : (t + 1) * dc], n)
            for t in range(model.T)]


def vddib_sr_loss(fwd: SrForward, labels, aux: Sequence[MLP], beta: float,
                  chunk_specs: Sequence[QuantizerSpec]) -> Tensor:
    """Minibatch estimate of the multi-round objective.

    mean over examples of (1/T) sum_tau CE(pred_tau) + beta * sum_k [CE(aux_k(u_k)) + sum_t a_kt n_k d_k ln 2].
    The rate term reaches the gate pre-activations through the binarizer surrogate.
    """
    labels = np.asarray(labels)
    T = len(fwd.logits)
    round_ce = mean(cross_entropy(fwd.logits[0], labels))
    for l in fwd.logits[1:]:
        round_ce = round_ce + mean(cross_entropy(l, labels))
    if T > 1:
        round_ce = round_ce * (1.0 / T)
    reg = None
    for k, spec in enumerate(chunk_specs):
        term = mean(cross_entropy(aux[k](fwd.codes[k]), labels))
        reg = term if reg is None else reg + term
    const_bits = 0.0
    for k, spec in enumerate(chunk_specs):
        const_bits += spec.n * spec.d  # round 1 always transmits
    rate = const_bits * LN2
    for tau in range(2, T + 1):
        a = fwd.attention[tau - 1]
        bits = np.array([s.n * s.d for s in chunk_specs], dtype=np.float64)
        rate = rate + mean((a * (bits * LN2)).sum(axis=-1))
    return round_ce + beta * (reg + rate)


def train_vddib_sr(features: Sequence[np.ndarray], labels: np.ndarray, cfg: SrConfig,
                   num_classes: int = 10) -> tuple[SrModel, list[float]]:
    """Train encoders, internal predictors, auxiliary predictors and gates jointly on frozen features."""
    zs = [np.asarray(f, dtype=np.float64) for f in features]
    labels = np.asarray(labels)
    model = SrModel([z.shape[1] for z in zs], num_classes, cfg)
    stream = minibatch_stream(len(labels), cfg.batch_size, seed=cfg.seed * 1000 + 29)
    opt = OptimizerState("adam", lr=cfg.lr)

    def step_loss(_step):
        idx = next(stream)
        return model.loss([z[idx] for z in zs], labels[idx])

    trace = run_steps(model.store, model.prefix, step_loss, cfg.steps, opt, label="vddib-sr")
    model.trained = True
    return model, trace
