"""Accuracy, plug-in information estimates and the rate–relevance point of a trained coder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .data import DiscreteTable
from .dvib import DvibModel
from .nn import LN2, Tensor, concat, cross_entropy, no_grad
from .quantize import QuantizerSpec
from .sim import ChannelModel, rounds_outcome
from .sr import SrModel
from .vddib import VddibModel


def entropy_bits(p) -> float:
    """Entropy of a probability vector (or unnormalized counts) in bits; 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.size == 0 or np.any(p < 0) or p.sum() <= 0:
        raise ValueError("need a nonempty nonnegative vector with positive mass")
    p = p[p > 0] / p.sum()
    return float(-(p * np.log2(p)).sum())


def _symbol_ids(x: np.ndarray) -> np.ndarray:
    """Map each row (or scalar) of x to a dense integer id."""
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[:, None]
    _, ids = np.unique(x.reshape(len(x), -1), axis=0, return_inverse=True)
    return ids.ravel()


def plugin_entropy(samples) -> float:
    """Plug-in entropy in bits of observed symbols; rows of a 2-D array are joint symbols."""
    samples = np.asarray(samples)
    if len(samples) == 0:
        raise ValueError("empty sample")
    return entropy_bits(np.bincount(_symbol_ids(samples)))


def empirical_code_entropy(indices) -> float:
    """Plug-in entropy (bits) of one device's codes over a set; each row is a code word."""
    return plugin_entropy(indices)


def plugin_mutual_information(x, y) -> float:
    """I(X;Y) in bits from empirical joint frequencies."""
    x, y = np.asarray(x), np.asarray(y)
    if len(x) != len(y) or len(x) == 0:
        raise ValueError("x and y need the same nonzero length")
    xi, yi = _symbol_ids(x), _symbol_ids(y)
    joint = np.zeros((xi.max() + 1, yi.max() + 1))
    np.add.at(joint, (xi, yi), 1.0)
    return mutual_information_table(joint)


def mutual_information_table(joint) -> float:
    """I(A;B) in bits for a 2-D joint table (normalized internally)."""
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2 or np.any(p < 0) or p.sum() <= 0:
        raise ValueError("need a nonnegative 2-D table with positive mass")
    p = p / p.sum()
    pa, pb = p.sum(1, keepdims=True), p.sum(0, keepdims=True)
    nz = p > 0
    return float((p[nz] * np.log2(p[nz] / (pa @ pb)[nz])).sum())


def table_mutual_information(table: DiscreteTable) -> float:
    """Exact I(Y; X_1..X_K) of a discrete table."""
    j = table.joint()
    return mutual_information_table(j.reshape(j.shape[0], -1))


def exact_code_mutual_information(table: DiscreteTable, code_maps: Sequence[np.ndarray]) -> float:
    """Exact I(Y; U_1..U_K) in bits when device k's code is ``code_maps[k][x_k]``.

    ``code_maps[k]`` has one row per symbol of X_k; rows are code words. The joint
    table is pushed through the deterministic encoders by enumeration.
    """
    j = table.joint()
    sizes = table.alphabet_sizes
    if len(code_maps) != len(sizes) or any(len(c) != s for c, s in zip(code_maps, sizes)):
        raise ValueError("need one code row per symbol for every device")
    ids = [_symbol_ids(np.asarray(c)) for c in code_maps]
    grid = np.stack(np.meshgrid(*[np.arange(s) for s in sizes], indexing="ij"), -1).reshape(-1, len(sizes))
    code_rows = np.stack([ids[k][grid[:, k]] for k in range(len(sizes))], axis=1)
    _, code_id = np.unique(code_rows, axis=0, return_inverse=True)
    code_id = code_id.ravel()
    pyu = np.zeros((j.shape[0], code_id.max() + 1))
    flat = j.reshape(j.shape[0], -1)
    for y in range(j.shape[0]):
        np.add.at(pyu[y], code_id, flat[y])
    return mutual_information_table(pyu)


class AccuracyReport(NamedTuple):
    accuracy: float
    avg_bits: float
    avg_rounds: float


def evaluate_accuracy(model, features: Sequence[np.ndarray], labels, delta0: float | None = None,
                      channel: ChannelModel = ChannelModel()) -> AccuracyReport:
    """Accuracy, average transmitted bits and average rounds over an evaluation set.

    ``model`` is an SrModel (``delta0`` required when T > 1), a VddibModel, or any
    object with ``predict_logits(features)`` and an integer ``total_bits``.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    if not getattr(model, "trained", True):
        raise RuntimeError("model has not been trained")
    if isinstance(model, SrModel):
        if delta0 is None and model.T > 1:
            raise ValueError("a confidence threshold is needed for multi-round models")
        out = model.run_all_rounds(features)
        o = rounds_outcome(out["probs"], out["attention"], model.chunk_specs, 0.0 if delta0 is None else delta0, channel)
        return AccuracyReport(float((o.predictions == labels).mean()), float(o.bits.mean()), float(o.rounds_used.mean()))
    bits = model.cfg.total_bits if isinstance(model, VddibModel) else model.total_bits
    preds = np.asarray(model.predict_logits(features)).argmax(axis=-1)
    return AccuracyReport(float((preds == labels).mean()), float(bits), 1.0)


@dataclass
class RateRelevancePoint:
    delta_bits: float
    rate_bits: float
    accuracy: float
    avg_bits: float
    label_entropy: float
    code_entropy: list[float]
    aux_relevance: list[float]  # estimates of I(Y; U_k) in bits
    config_ref: str = ""
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def _coder_outputs(model, features) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray], list[QuantizerSpec]]:
    """Joint logits, per-device aux logits, per-device code indices and full-code specs."""
    if isinstance(model, VddibModel):
        codes = model.codes(features)
        aux = model.aux_logits(codes)
        return model.predict_logits(features), aux, [c.indices for c in codes], list(model.specs)
    if isinstance(model, DvibModel):
        codes = model.codes(features)
        with no_grad():
            aux = [model.aux[k](c[0]).data for k, c in enumerate(codes)]
            logits = model.joint(concat([c[0] for c in codes])).data
        return logits, aux, [c[1] for c in codes], list(model.specs)
    if isinstance(model, SrModel):
        with no_grad():
            fwd = model.forward(features)
            aux = [model.aux[k](fwd.codes[k]).data for k in range(model.K)]
        specs = [QuantizerSpec(s.n, s.d * model.T) for s in model.chunk_specs]
        return fwd.logits[-1].data, aux, fwd.indices, specs
    raise TypeError("rate-relevance estimation needs a VddibModel, SrModel or DvibModel with auxiliary predictors")


def estimate_rate_relevance(model, features: Sequence[np.ndarray], labels, config_ref: str = "",
                            avg_bits: float | None = None) -> RateRelevancePoint:
    """Plug-in rate–relevance point.

    Relevance: H(Y) minus the joint cross-entropy in bits. Rate: relevance plus, per
    device, the plug-in code entropy minus the device's own relevance estimate
    (H(Y) minus its auxiliary cross-entropy). The code entropy stands in for
    I(Z_k; U_k) because the encoders are deterministic.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    if getattr(model, "aux", None) is None:
        raise ValueError("model has no auxiliary predictors")
    joint_logits, aux_logits, indices, specs = _coder_outputs(model, features)
    hy = plugin_entropy(labels)
    ce_bits = lambda logits: float(cross_entropy(Tensor(logits), labels).data.mean()) / LN2
    delta = hy - ce_bits(joint_logits)
    h_u = [empirical_code_entropy(i) for i in indices]
    for h, s in zip(h_u, specs):
        if h > s.bit_cost + 1e-9:  # cannot happen for a finite alphabet; guards the accounting
            raise AssertionError(f"code entropy {h} exceeds its {s.bit_cost}-bit budget")
    i_yu = [hy - ce_bits(a) for a in aux_logits]
    rate = delta + sum(h - i for h, i in zip(h_u, i_yu))
    acc = float((joint_logits.argmax(-1) == labels).mean())
    bits = float(sum(s.bit_cost for s in specs)) if avg_bits is None else float(avg_bits)
    return RateRelevancePoint(delta, rate, acc, bits, hy, h_u, i_yu, config_ref)
