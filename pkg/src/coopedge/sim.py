"""Inference episodes between edge devices and the server over error-free bit pipes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .quantize import QuantizerSpec, dequantize, pack_bits, unpack_bits
from .sr import SrModel, SrRoundState, chunk_code, confidence


@dataclass(frozen=True)
class ChannelModel:
    mode: str = "serial"  # "serial" | "parallel"
    uplink_rate: float = 18_000.0  # bytes per second

    def __post_init__(self):
        if self.mode not in ("serial", "parallel"):
            raise ValueError(f"unknown channel mode {self.mode!r}")
        if not self.uplink_rate > 0:
            raise ValueError("uplink_rate must be positive")


def latency(total_bits, channel: ChannelModel) -> float:
    """Seconds to push the uplink payload.

    ``total_bits`` is an int or a per-device sequence. Serial mode sends everything
    through one pipe; parallel mode gives every device its own pipe.
    """
    per_device = np.atleast_1d(np.asarray(total_bits, dtype=np.float64))
    if np.any(per_device < 0):
        raise ValueError("bit counts must be nonnegative")
    if per_device.size == 0:
        return 0.0
    bits = per_device.sum() if channel.mode == "serial" else per_device.max()
    return float(bits / (8.0 * channel.uplink_rate))


class Coder(Protocol):
    """What an episode needs from a multi-round coder; SrModel implements it."""

    T: int
    K: int
    chunk_specs: list[QuantizerSpec]
    trained: bool

    def round_probabilities(self, received: Sequence[Sequence[np.ndarray]]) -> np.ndarray: ...

    def round_attention(self, received: Sequence[Sequence[np.ndarray]]) -> np.ndarray: ...


@dataclass
class EpisodeTrace:
    rounds: list[SrRoundState]
    prediction: int
    rounds_used: int
    total_bits: int
    per_device_bits: list[int]
    payload_bytes: int
    latency: float

    def to_json(self) -> str:
        def plain(o):
            if isinstance(o, np.ndarray):
                return o.tolist()
            if isinstance(o, np.generic):
                return o.item()
            raise TypeError(type(o))

        return json.dumps(asdict(self), default=plain, sort_keys=True)


@dataclass
class EdgeSystem:
    """Trained extractors (one per device) plus the coder shared by devices and server."""

    extractors: Sequence  # objects with .features(x) -> [N, d] and .trained
    coder: SrModel

    def features(self, views: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [m.features(np.asarray(v)) for m, v in zip(self.extractors, views)]


def _check_trained(*models) -> None:
    for m in models:
        if not getattr(m, "trained", False):
            raise RuntimeError(f"{type(m).__name__} has not been trained")


def run_inference_episode(chunks: Sequence[Sequence[np.ndarray]], coder: Coder, delta0: float,
                          channel: ChannelModel = ChannelModel()) -> EpisodeTrace:
    """One sample's episode given each device's per-round code indices.

    ``chunks[k][t]`` holds device k's quantization indices for round t+1. Every
    transmitted chunk crosses the wire as a packed payload and is dequantized by
    the server from the unpacked indices.
    """
    _check_trained(coder)
    K, T = coder.K, coder.T
    if len(chunks) != K or any(len(c) != T for c in chunks):
        raise ValueError(f"expected {K} devices with {T} chunks each")
    received: list[list[np.ndarray]] = []
    rounds: list[SrRoundState] = []
    per_device = [0] * K
    payload_bytes = 0
    attention = np.ones(K)
    for tau in range(1, T + 1):
        if tau > 1:
            attention = np.asarray(coder.round_attention(received)).reshape(K)
        gated = []
        for k, spec in enumerate(coder.chunk_specs):
            if attention[k] == 1:
                payload = pack_bits(chunks[k][tau - 1], spec.n)
                payload_bytes += len(payload)
                per_device[k] += spec.n * spec.d
                gated.append(dequantize(unpack_bits(payload, spec.n, spec.d), spec.n))
            else:
                gated.append(np.zeros(spec.d))
        received.append(gated)
        probs = np.asarray(coder.round_probabilities([[u[None] for u in rnd] for rnd in received])).reshape(-1)
        conf = float(confidence(probs))
        last = tau == T
        rounds.append(SrRoundState(tau, attention.copy(), gated, sum(per_device), None if last else conf))
        if last or conf >= delta0:
            break
    total = sum(per_device)
    return EpisodeTrace(rounds, int(np.argmax(probs)), len(rounds), total, per_device, payload_bytes,
                        latency(per_device if channel.mode == "parallel" else total, channel))


def run_sample(system: EdgeSystem, views: Sequence[np.ndarray], delta0: float,
               channel: ChannelModel = ChannelModel()) -> EpisodeTrace:
    """Full pipeline for one sample: on-device extraction and chunked encoding, then the episode."""
    _check_trained(system.coder, *system.extractors)
    chunks = []
    for k, (m, v) in enumerate(zip(system.extractors, views)):
        z = m.features(np.asarray(v)[None])
        chunks.append([c.indices[0] for c in chunk_code(z, system.coder, k)])
    return run_inference_episode(chunks, system.coder, delta0, channel)


@dataclass
class BatchOutcome:
    """Per-example results of the stopping rule applied to precomputed rounds."""

    predictions: np.ndarray
    rounds_used: np.ndarray
    bits: np.ndarray  # [N]
    per_device_bits: np.ndarray  # [N, K]
    latency: np.ndarray
    extra: dict = field(default_factory=dict)


def rounds_outcome(probs: np.ndarray, attention: np.ndarray, chunk_specs: Sequence[QuantizerSpec],
                   delta0: float, channel: ChannelModel = ChannelModel()) -> BatchOutcome:
    """Apply threshold stopping to all-round outputs ([T, N, C] probabilities, [T, N, K] attention).

    Gates only see earlier rounds, so computing every round up front and stopping
    afterwards gives the same result as running episodes one round at a time.
    """
    T, N, _ = probs.shape
    conf = probs.max(axis=-1)  # [T, N]
    stop = conf >= delta0
    stop[-1] = True
    used = stop.argmax(axis=0) + 1  # first stopping round, 1-based
    chunk_bits = np.array([s.n * s.d for s in chunk_specs], dtype=np.int64)
    sent = (np.arange(1, T + 1)[:, None] <= used[None, :])[..., None] * (attention == 1)  # [T, N, K]
    per_device = (sent * chunk_bits).sum(axis=0)
    bits = per_device.sum(axis=1)
    preds = probs[used - 1, np.arange(N)].argmax(axis=-1)
    if channel.mode == "serial":
        lat = bits / (8.0 * channel.uplink_rate)
    else:
        lat = per_device.max(axis=1) / (8.0 * channel.uplink_rate)
    return BatchOutcome(preds, used, bits, per_device, lat)


def evaluate_batch(system: EdgeSystem, views: Sequence[np.ndarray], delta0: float,
                   channel: ChannelModel = ChannelModel(), features: Sequence[np.ndarray] | None = None) -> BatchOutcome:
    """Vectorized episodes over a whole evaluation set."""
    _check_trained(system.coder, *system.extractors)
    zs = features if features is not None else system.features(views)
    out = system.coder.run_all_rounds(zs)
    return rounds_outcome(out["probs"], out["attention"], system.coder.chunk_specs, delta0, channel)
