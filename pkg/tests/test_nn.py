import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from coopedge import nn
from coopedge.nn import (MLP, OptimizerState, ParamStore, Tensor, cross_entropy, linear, load_archive, optimizer_step,
                         relu, save_archive, softmax_cross_entropy)


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


class TestLinear:
    def test_identity(self):
        out = linear(T([3.0, -1.0]), T(np.eye(2)), T([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [3.0, -1.0])

    def test_zero_weights_give_bias(self):
        out = linear(T([7.0, -2.0]), T(np.zeros((2, 2))), T([5.0, 5.0]))
        np.testing.assert_array_equal(out.data, [5.0, 5.0])

    def test_hand_product(self):
        out = linear(T([1.0, 1.0]), T([[1.0, 2.0], [3.0, 4.0]]), T([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [3.0, 7.0])

    def test_batch_rows_match_single(self):
        rng = np.random.default_rng(0)
        W, b, x = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(5, 4))
        batch = linear(T(x), T(W), T(b)).data
        for i in range(5):
            np.testing.assert_allclose(batch[i], linear(T(x[i]), T(W), T(b)).data, rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            linear(T([1.0, 2.0, 3.0]), T(np.eye(2)), T([0.0, 0.0]))


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu(T([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        assert not relu(T(-np.arange(1.0, 6.0))).data.any()

    def test_gradient_zero_at_kink(self):
        x = T([-1.0, 0.0, 2.0], grad=True)
        relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


class TestCrossEntropy:
    def test_uniform(self):
        assert softmax_cross_entropy(T(np.zeros(10)), 3).item() == pytest.approx(math.log(10), abs=1e-12)

    def test_saturated(self):
        assert softmax_cross_entropy(T([30.0, 0.0, 0.0]), 0).item() <= 1e-12

    def test_two_class(self):
        assert softmax_cross_entropy(T([1.0, 2.0]), 1).item() == pytest.approx(0.313261687518223, abs=1e-12)

    @pytest.mark.parametrize("label", [-1, 2])
    def test_label_range(self, label):
        with pytest.raises(ValueError):
            softmax_cross_entropy(T([1.0, 2.0]), label)

    @settings(max_examples=200, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(2, 12), elements=st.floats(-50, 50)),
           st.floats(-1e3, 1e3), st.data())
    def test_shift_invariance(self, logits, c, data):
        label = data.draw(st.integers(0, len(logits) - 1))
        a = softmax_cross_entropy(T(logits), label).item()
        b = softmax_cross_entropy(T(logits + c), label).item()
        assert abs(a - b) <= 1e-10

    def test_batched_matches_single(self):
        rng = np.random.default_rng(1)
        logits, y = rng.normal(size=(6, 4)), rng.integers(0, 4, 6)
        batch = cross_entropy(T(logits), y).data
        for i in range(6):
            assert batch[i] == pytest.approx(softmax_cross_entropy(T(logits[i]), int(y[i])).item(), abs=1e-14)


class TestBackward:
    def test_without_graph(self):
        with pytest.raises(RuntimeError):
            T([1.0]).backward()

    def test_non_scalar_root(self):
        x = T([1.0, 2.0], grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_linear_in_w(self):
        w = T(1.5, grad=True)
        (w * 3.0).backward()
        assert w.grad == 3.0

    def test_independent_parameter(self):
        w, p = T(1.0, grad=True), T([4.0, 5.0], grad=True)
        (w * w + p.sum() * 0.0).backward()
        np.testing.assert_array_equal(p.grad, [0.0, 0.0])

    def test_shared_node_accumulates(self):
        x = T(3.0, grad=True)
        y = x * x
        (y + y).backward()
        assert x.grad == 12.0

    def test_non_finite_forward_is_an_error(self):
        with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
            T([1e308], grad=True) * 1e10

    def test_no_grad_records_nothing(self):
        x = T([1.0], grad=True)
        with nn.no_grad():
            y = x * 2.0
        assert not y.requires_grad


class TestOptimizer:
    def _one(self, value, grad, **kw):
        store = ParamStore()
        p = store.add("p", np.array([value]))
        p.grad = np.array([grad])
        opt = OptimizerState(**kw)
        optimizer_step(opt, store)
        return p, opt

    def test_zero_gradient_keeps_parameters(self):
        for alg in ("sgd", "adam"):
            p, _ = self._one(1.0, 0.0, algorithm=alg, lr=0.1)
            assert p.data[0] == 1.0

    def test_sgd_step(self):
        p, opt = self._one(1.0, 2.0, algorithm="sgd", lr=0.1)
        assert p.data[0] == pytest.approx(0.8, abs=1e-15)
        assert p.grad is None and opt.step_count == 1

    def test_adam_first_step(self):
        p, _ = self._one(1.0, 2.0, algorithm="adam", lr=0.001)
        # bias-corrected moments at t = 1 are g and g^2, so the step is lr * g / (|g| + eps)
        assert 1.0 - p.data[0] == pytest.approx(0.001 * 2.0 / (2.0 + 1e-8), abs=1e-15)

    def test_missing_gradients(self):
        store = ParamStore()
        store.add("p", np.ones(2))
        with pytest.raises(RuntimeError):
            optimizer_step(OptimizerState("sgd", lr=0.1), store)

    def test_unknown_algorithm(self):
        with pytest.raises(ValueError):
            OptimizerState("rmsprop", lr=0.1)


class TestParamStore:
    def test_duplicate_names(self):
        s = ParamStore()
        s.add("a", np.zeros(1))
        with pytest.raises(KeyError):
            s.add("a", np.zeros(1))

    def test_sorted_iteration(self):
        s = ParamStore()
        for n in ("b/x", "a/y", "a/x"):
            s.add(n, np.zeros(1))
        assert s.names() == ["a/x", "a/y", "b/x"]
        assert s.names("a/") == ["a/x", "a/y"]

    def test_glorot_bounds(self):
        s = ParamStore()
        MLP(s, "m", [30, 20, 10], np.random.default_rng(0))
        w = s["m/l0/W"].data
        assert w.shape == (20, 30)
        assert np.abs(w).max() <= math.sqrt(6 / 50)
        assert not s["m/l0/b"].data.any()

    def test_same_seed_same_init(self):
        a, b = ParamStore(), ParamStore()
        MLP(a, "m", [5, 4, 3], np.random.default_rng(9))
        MLP(b, "m", [5, 4, 3], np.random.default_rng(9))
        for n in a.names():
            np.testing.assert_array_equal(a[n].data, b[n].data)


class TestArchive:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        tensors = {"vib/k0/enc/l0/W": rng.normal(size=(4, 3)), "scalar": np.array(np.pi), "empty": np.zeros((0, 2)),
                   "odd": np.array([np.nextafter(0, 1), -0.0, 1e308])}
        save_archive(tmp_path / "a.ntar", tensors, {"note": "x"})
        back, meta = load_archive(tmp_path / "a.ntar")
        assert meta["note"] == "x"
        assert set(back) == set(tensors)
        for k, v in tensors.items():
            assert back[k].shape == v.shape
            assert back[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()

    def test_manifest_layout(self, tmp_path):
        import json
        import struct

        save_archive(tmp_path / "a.ntar", {"b": np.ones(2), "a": np.arange(3.0)})
        raw = (tmp_path / "a.ntar").read_bytes()
        assert raw[:4] == b"NTAR"
        (n,) = struct.unpack("<Q", raw[4:12])
        manifest = json.loads(raw[12 : 12 + n])
        assert manifest["version"] == 1
        entries = {t["name"]: t for t in manifest["tensors"]}
        assert entries["a"]["dtype"] == "f64" and entries["a"]["shape"] == [3]
        blob = raw[12 + n :]
        a = entries["a"]
        np.testing.assert_array_equal(np.frombuffer(blob[a["offset"] : a["offset"] + a["length"]], "<f8"), [0, 1, 2])

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"nope")
        with pytest.raises(ValueError):
            load_archive(tmp_path / "bad")
