import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepbcr import gradcore as gc
from deepbcr.errors import GraphCycle, NonFiniteValue, NonScalarLoss, ShapeMismatch, CheckpointFormatError


def numeric_grad(fn, params, eps=1e-4):
    out = {}
    for name, p in params.items():
        flat = p.value.reshape(-1)
        out[name] = np.array([float(gc.central_difference(fn, flat, i, eps, richardson=2)) for i in range(flat.size)])
    return out


class TestPrimitives:
    def test_row_softmax_example(self):
        out = gc.row_softmax(gc.Tensor([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(out.value, [[0.25, 0.75]], atol=1e-15)

    def test_bce_example(self):
        p = gc.parameter([[0.5]], "p")
        loss = gc.bce_loss(p, 1.0)
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-15)
        g = gc.backward(loss, {"p": p})
        np.testing.assert_allclose(g["p"], [[-2.0]], atol=1e-12)

    def test_bce_clip_zeroes_gradient(self):
        p = gc.parameter([[1.0]], "p")
        loss = gc.bce_loss(p, 0.0)
        assert np.isfinite(loss.item())
        assert gc.backward(loss, {"p": p})["p"][0, 0] == 0.0

    def test_bce_target_size_checked(self):
        with pytest.raises(ShapeMismatch):
            gc.bce_loss(gc.Tensor([[0.2, 0.3]]), [1.0])

    def test_relu_gradient_at_zero(self):
        x = gc.parameter([[0.0, -1.0, 2.0]], "x")
        g = gc.backward(gc.sum(gc.relu(x)), {"x": x})
        np.testing.assert_array_equal(g["x"], [[0.0, 0.0, 1.0]])

    def test_rank_limit(self):
        with pytest.raises(ShapeMismatch):
            gc.Tensor(np.zeros((2, 2, 2)))

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            gc.matmul(gc.Tensor(np.zeros((2, 3))), gc.Tensor(np.zeros((2, 3))))

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteValue):
            gc.Tensor([[np.nan]])

    def test_item_requires_scalar(self):
        with pytest.raises(NonScalarLoss):
            gc.Tensor([[1.0, 2.0]]).item()

    def test_dropout_identity_in_eval(self):
        a = gc.Tensor(np.ones((3, 4)))
        np.testing.assert_array_equal(gc.dropout(a, 0.5, np.random.default_rng(0), False).value, a.value)

    def test_dropout_inverted_scaling(self):
        rng = np.random.default_rng(1)
        out = gc.dropout(gc.Tensor(np.ones((200, 50))), 0.25, rng, train=True).value
        kept = out[out > 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert abs(kept.size / out.size - 0.75) < 0.02

    def test_unused_param_gets_zero_grad(self):
        a = gc.parameter([[1.0, 2.0]], "a")
        b = gc.parameter([[3.0]], "b")
        g = gc.backward(gc.sum(a), {"a": a, "b": b})
        np.testing.assert_array_equal(g["b"], [[0.0]])

    def test_cycle_detected(self):
        a = gc.parameter([[1.0]], "a")
        b = gc.scale(a, 2.0)
        a.parents = (b,)
        with pytest.raises(GraphCycle):
            gc.backward(gc.sum(b), {"a": a})

    def test_backward_requires_scalar(self):
        a = gc.parameter([[1.0, 2.0]], "a")
        with pytest.raises(NonScalarLoss):
            gc.backward(gc.relu(a), {"a": a})


OPS = {
    "matmul": lambda a, b: gc.sum(gc.matmul(a, gc.transpose(b))),
    "add": lambda a, b: gc.sum(gc.tanh(gc.add(a, b))),
    "mul": lambda a, b: gc.sum(gc.mul(gc.tanh(a), gc.sigmoid(b))),
    "softmax": lambda a, b: gc.sum(gc.mul(gc.row_softmax(a), b)),
    "mean_scale": lambda a, b: gc.mean(gc.scale(gc.mul(a, b), 3.0)),
    "bce": lambda a, b: gc.bce_loss(gc.sigmoid(gc.add(a, b)), np.ones(a.value.size)),
}


class TestPrimitiveGradients:
    @pytest.mark.parametrize("op", sorted(OPS))
    @settings(max_examples=15, deadline=None)
    @given(rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 10_000))
    def test_matches_finite_differences(self, op, rows, cols, seed):
        rng = np.random.default_rng(seed)
        a = gc.parameter(rng.normal(size=(rows, cols)), "a")
        b = gc.parameter(rng.normal(size=(rows, cols)), "b")
        params = {"a": a, "b": b}
        grads = gc.backward(OPS[op](a, b), params)
        num = numeric_grad(lambda: OPS[op](a, b).item(), params)
        for k in params:
            np.testing.assert_allclose(grads[k].reshape(-1), num[k], rtol=1e-6, atol=1e-9)

    def test_row_broadcast(self):
        a = gc.parameter(np.arange(6.0).reshape(3, 2), "a")
        r = gc.parameter([[1.0, -1.0]], "r")
        g = gc.backward(gc.sum(gc.tanh(gc.add(a, r))), {"a": a, "r": r})
        np.testing.assert_allclose(g["r"], g["a"].sum(axis=0, keepdims=True))

    def test_column_broadcast(self):
        a = gc.parameter(np.arange(6.0).reshape(3, 2), "a")
        c = gc.parameter([[1.0], [2.0], [3.0]], "c")
        g = gc.backward(gc.sum(gc.mul(gc.add(a, c), gc.Tensor(np.ones((3, 2))))), {"a": a, "c": c})
        np.testing.assert_array_equal(g["c"], [[2.0], [2.0], [2.0]])


class TestAdam:
    def test_first_step_magnitude(self):
        p = gc.parameter([[0.0]], "w")
        state = gc.AdamState(lr=1e-4, weight_decay=0.0)
        gc.adam_step({"w": p}, {"w": np.array([[0.37]])}, state)
        assert p.value[0, 0] == pytest.approx(-1e-4, rel=1e-6)
        assert state.t == 1

    def test_coupled_weight_decay(self):
        p = gc.parameter([[2.0]], "w")
        state = gc.AdamState(lr=1e-3, weight_decay=0.5)
        gc.adam_step({"w": p}, {"w": np.zeros((1, 1))}, state)
        # the decay term is the whole gradient, so the first step is -lr * sign
        assert p.value[0, 0] == pytest.approx(2.0 - 1e-3, rel=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(g=st.floats(-1e3, 1e3).filter(lambda v: abs(v) > 1e-3), steps=st.integers(1, 5))
    def test_step_bounded_by_lr(self, g, steps):
        p = gc.parameter([[0.0]], "w")
        state = gc.AdamState(lr=1e-2, weight_decay=0.0)
        for _ in range(steps):
            before = p.value.copy()
            gc.adam_step({"w": p}, {"w": np.array([[g]])}, state)
            assert abs(p.value[0, 0] - before[0, 0]) <= 1e-2 * (1 + 1e-9)

    def test_shape_checked(self):
        p = gc.parameter([[0.0, 1.0]], "w")
        with pytest.raises(ShapeMismatch):
            gc.adam_step({"w": p}, {"w": np.zeros((1, 1))}, gc.AdamState())


class TestFiniteDiff:
    def test_richardson_beats_plain(self):
        x = np.array([0.7])
        exact = math.cos(0.7)
        fn = lambda: math.sin(x[0])  # noqa: E731
        plain = gc.central_difference(fn, x, 0, 1e-2)
        rich = gc.central_difference(fn, x, 0, 1e-2, richardson=2)
        assert abs(rich - exact) < abs(plain - exact) / 1e3
        assert x[0] == 0.7

    def test_check_reports_relative_error(self):
        w = gc.parameter([[1.5, -0.5]], "w")
        fn = lambda: float(np.sum(w.value**2))  # noqa: E731
        errs = gc.finite_diff_check(fn, {"w": w}, {"w": 2 * w.value}, eps=1e-4)
        assert errs["w"] < 1e-8
        errs = gc.finite_diff_check(fn, {"w": w}, {"w": 2.2 * w.value}, eps=1e-4)
        assert errs["w"] == pytest.approx(0.2 / 2.2, rel=1e-6)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        arrays = {"b": np.arange(3.0).reshape(1, 3), "a": np.random.default_rng(0).normal(size=(4, 2))}
        gc.save_checkpoint(tmp_path / "m.dbcp", arrays, {"kind": "x"})
        back, meta = gc.load_checkpoint(tmp_path / "m.dbcp")
        assert meta == {"kind": "x"}
        assert list(back) == list(arrays)
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])

    def test_bytes_deterministic(self):
        arrays = {"w": np.ones((2, 2))}
        assert gc.encode_checkpoint(arrays) == gc.encode_checkpoint(dict(arrays))

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:-3],
        lambda b: b + b"\0",
    ])
    def test_malformed(self, mutate):
        data = gc.encode_checkpoint({"w": np.ones((2, 2))})
        with pytest.raises(CheckpointFormatError):
            gc.decode_checkpoint(mutate(data))
