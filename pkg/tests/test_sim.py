import json

import numpy as np
import pytest

from coopedge.quantize import QuantizerSpec, pack_bits
from coopedge.sim import ChannelModel, EpisodeTrace, latency, rounds_outcome, run_inference_episode
from coopedge.sr import SrConfig, SrModel, chunk_code

SMALL = dict(encoder_hidden=(8,), pred_hidden=(16,), aux_hidden=(8,), gate_hidden=(6,))


class Scripted:
    """Coder whose per-round confidences and gate decisions are fixed in advance."""

    def __init__(self, confidences, attention, specs, classes=3):
        self.T, self.K, self.chunk_specs, self.trained = len(confidences), len(specs), specs, True
        self.conf, self.att, self.C = confidences, attention, classes
        self.calls = []

    def round_probabilities(self, received):
        tau = len(received)
        self.calls.append(tau)
        c = self.conf[tau - 1]
        p = np.full(self.C, (1 - c) / (self.C - 1))
        p[tau % self.C] = c
        return p

    def round_attention(self, received):
        return np.asarray(self.att[len(received)], dtype=float)


SPECS = [QuantizerSpec(1, 4), QuantizerSpec(2, 3)]


def _chunks(T, rng=np.random.default_rng(0)):
    return [[rng.integers(0, 2**s.n, s.d) for _ in range(T)] for s in SPECS]


class TestLatency:
    def test_nbiot_figure(self):
        assert latency(360, ChannelModel("serial", 18_000)) == 0.0025

    def test_zero(self):
        assert latency(0, ChannelModel()) == 0.0

    def test_parallel(self):
        assert latency([80, 40], ChannelModel("parallel", 18_000)) == pytest.approx(80 / (8 * 18_000), rel=1e-15)

    def test_serial_sums_devices(self):
        assert latency([80, 40], ChannelModel("serial", 18_000)) == pytest.approx(120 / 144_000, rel=1e-15)

    def test_channel_validation(self):
        with pytest.raises(ValueError):
            ChannelModel(uplink_rate=0)
        with pytest.raises(ValueError):
            ChannelModel(mode="mesh")


class TestEpisode:
    def test_zero_threshold_stops_after_round_one(self):
        coder = Scripted([0.4, 0.9], [None, [1, 1]], SPECS)
        tr = run_inference_episode(_chunks(2), coder, 0.0)
        assert tr.rounds_used == 1 and tr.total_bits == 4 + 6

    def test_threshold_above_one_runs_all_rounds(self):
        coder = Scripted([0.99, 0.99, 0.99], [None, [1, 1], [1, 0]], SPECS)
        tr = run_inference_episode(_chunks(3), coder, 1.01)
        assert tr.rounds_used == 3 and tr.total_bits == 10 + 10 + 4
        assert tr.rounds[-1].confidence is None

    def test_scripted_stop_at_round_two(self):
        coder = Scripted([0.5, 0.95, 0.99], [None, [1, 1], [1, 1]], SPECS)
        tr = run_inference_episode(_chunks(3), coder, 0.9)
        assert tr.rounds_used == 2 and coder.calls == [1, 2]
        assert tr.prediction == 2 % 3

    def test_bit_accounting_and_gating(self):
        coder = Scripted([0.1, 0.1, 0.1], [None, [0, 1], [1, 0]], SPECS)
        chunks = _chunks(3)
        tr = run_inference_episode(chunks, coder, 0.5)
        assert [r.cumulative_bits for r in tr.rounds] == [10, 16, 20]
        assert tr.per_device_bits == [8, 12]
        assert not tr.rounds[1].gated[0].any()
        np.testing.assert_array_equal(tr.rounds[0].attention, [1, 1])
        sent = [(k, t) for t, a in enumerate([[1, 1], [0, 1], [1, 0]]) for k in range(2) if a[k]]
        wire_bits = sum(s.n * s.d for s in (SPECS[k] for k, _ in sent))
        wire_bytes = sum(len(pack_bits(chunks[k][t], SPECS[k].n)) for k, t in sent)
        assert tr.total_bits == wire_bits and tr.payload_bytes == wire_bytes

    def test_latency_modes(self):
        coder = Scripted([0.1, 0.1], [None, [0, 1]], SPECS)
        serial = run_inference_episode(_chunks(2), coder, 0.5, ChannelModel("serial", 100))
        parallel = run_inference_episode(_chunks(2), coder, 0.5, ChannelModel("parallel", 100))
        assert serial.latency == pytest.approx(16 / 800)
        assert parallel.latency == pytest.approx(12 / 800)

    def test_untrained(self):
        coder = Scripted([0.5], [None], SPECS)
        coder.trained = False
        with pytest.raises(RuntimeError):
            run_inference_episode(_chunks(1), coder, 0.5)

    def test_json_round_trip(self):
        tr = run_inference_episode(_chunks(2), Scripted([0.2, 0.3], [None, [1, 0]], SPECS), 0.9)
        back = json.loads(tr.to_json())
        assert back["rounds_used"] == 2 and back["total_bits"] == tr.total_bits
        assert back["rounds"][1]["attention"] == [1.0, 0.0]


def _trained_like_model(seed=0):
    m = SrModel([4, 5], 3, SrConfig(T=3, n=(1, 2), d_chunk=(2, 3), seed=seed, **SMALL))
    m.trained = True
    return m


class TestAgainstModel:
    def test_vectorized_equals_episodes(self):
        m = _trained_like_model()
        rng = np.random.default_rng(1)
        z = [rng.normal(size=(40, 4)), rng.normal(size=(40, 5))]
        out = m.run_all_rounds(z)
        for d0 in (0.0, 0.4, 0.6, 1.01):
            o = rounds_outcome(out["probs"], out["attention"], m.chunk_specs, d0)
            for i in range(40):
                chunks = [[c.indices[0] for c in chunk_code(z[k][i : i + 1], m, k)] for k in range(2)]
                tr = run_inference_episode(chunks, m, d0)
                assert (tr.prediction, tr.rounds_used, tr.total_bits) == (o.predictions[i], o.rounds_used[i], o.bits[i])

    def test_episode_determinism(self):
        m = _trained_like_model()
        z = np.random.default_rng(2).normal(size=(1, 4)), np.random.default_rng(3).normal(size=(1, 5))
        chunks = [[c.indices[0] for c in chunk_code(z[k], m, k)] for k in range(2)]
        assert run_inference_episode(chunks, m, 0.7).to_json() == run_inference_episode(chunks, m, 0.7).to_json()

    def test_rounds_monotone_in_threshold(self):
        m = _trained_like_model(4)
        z = [np.random.default_rng(5).normal(size=(200, 4)), np.random.default_rng(6).normal(size=(200, 5))]
        out = m.run_all_rounds(z)
        used = [rounds_outcome(out["probs"], out["attention"], m.chunk_specs, d).rounds_used
                for d in (1.01, 0.99, 0.9, 0.5, 0.0)]
        for hi, lo in zip(used, used[1:]):
            assert np.all(lo <= hi)
