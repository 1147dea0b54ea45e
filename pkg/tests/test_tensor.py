import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import erf

from relm import tensor as T
from relm.errors import ShapeError
from relm.optim import Adam, inv_sqrt_lr
from relm.tensor import Parameter, Tensor, no_grad

from oracles import gradcheck_params

F64 = np.float64


def P(shape, seed, name, scale=1.0):
    return Parameter(np.random.default_rng(seed).standard_normal(shape) * scale, name)


def check(builder, params, tol=1e-4):
    errs = gradcheck_params(builder, params)
    assert max(errs.values()) < tol, errs


class TestForward:
    def test_gelu_values(self):
        x = Tensor(np.array([0.0, 1.0]))
        y = T.gelu(x).data
        assert y[0] == 0.0
        assert y[1] == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), abs=1e-12)
        assert y[1] == pytest.approx(0.841345, abs=1e-6)

    def test_gelu_float32_close_to_exact(self):
        x = np.linspace(-8, 8, 10001, dtype=np.float32)
        exact = x.astype(F64) * 0.5 * (1 + erf(x.astype(F64) / math.sqrt(2)))
        assert np.abs(T.gelu(Tensor(x)).data - exact).max() < 5e-6
        assert T.gelu(Tensor(np.array([1.0], dtype=np.float32))).data[0] == pytest.approx(0.841345, abs=1e-6)

    def test_softmax_constant(self):
        y = T.softmax(Tensor(np.full((3, 7), 2.5))).data
        assert np.allclose(y, 1 / 7)

    @given(arrays(F64, (4, 6), elements=st.floats(-30, 30)))
    def test_softmax_rows_sum(self, x):
        assert np.allclose(T.softmax(Tensor(x)).data.sum(-1), 1.0, atol=1e-6)

    @given(arrays(F64, (5, 8), elements=st.floats(-100, 100)))
    def test_layer_norm_moments(self, x):
        x = x + np.random.default_rng(0).standard_normal(x.shape)  # avoid constant rows
        y = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        assert np.abs(y.mean(-1)).max() < 1e-6
        assert np.abs(y.var(-1) - 1).max() < 1e-4

    def test_cross_entropy_vanishes(self):
        for gap in (5.0, 20.0, 60.0):
            logits = np.zeros((1, 4))
            logits[0, 2] = gap
            loss = T.cross_entropy(Tensor(logits), np.array([2])).item()
            assert loss < 4 * math.exp(-gap) + 1e-15
        assert T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([-100, -100])).item() == 0.0

    def test_dropout_expectation(self):
        gen = np.random.default_rng(0)
        y = T.dropout(Tensor(np.ones(10**6)), 0.1, gen).data
        assert abs(y.mean() - 1) < 0.01
        assert set(np.unique(y).round(6)) <= {0.0, round(1 / 0.9, 6)}

    def test_dropout_eval_identity(self):
        x = Tensor(np.ones(5))
        assert T.dropout(x, 0.5, None, training=False) is x

    def test_shape_errors(self):
        with pytest.raises(ShapeError, match="matmul"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with pytest.raises(ShapeError, match="add"):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with pytest.raises(ShapeError, match="layer_norm"):
            T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.ones(4)))


class TestBackward:
    def test_sum_grad_ones(self):
        w = P((3, 4), 0, "w")
        T.total(w).backward()
        assert np.array_equal(w.grad, np.ones((3, 4)))

    def test_square(self):
        x = Parameter(np.array(3.0), "x")
        T.mul(x, x).backward()
        assert x.grad == 6.0

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            T.mul(P((2,), 0, "x"), 2.0).backward()

    def test_accumulates(self):
        x = Parameter(np.array(3.0), "x")
        T.mul(x, x).backward()
        T.mul(x, x).backward()
        assert x.grad == 12.0

    def test_frozen_gets_nothing(self):
        w = P((3,), 0, "w")
        w.trainable = False
        v = P((3,), 1, "v")
        T.total(T.mul(w, v)).backward()
        assert not w.grad.any() and v.grad.any()

    def test_no_grad_records_nothing(self):
        w = P((3,), 0, "w")
        with no_grad():
            y = T.mul(w, w)
        assert not y.requires_grad

    def test_elementwise_and_structural(self):
        a, b = P((2, 3, 4), 0, "a"), P((4, 5), 1, "b")
        c = P((1, 3, 1), 2, "c")
        check(lambda: T.total(T.gelu(T.mul(T.add(T.matmul(a, b), c), T.transpose(
            T.reshape(T.matmul(a, b), (2, 5, 3)), (0, 2, 1))))), [a, b, c])

    def test_linear(self):
        x, w, b = P((2, 3, 4), 0, "x"), P((4, 5), 1, "w"), P((5,), 2, "b")
        check(lambda: T.total(T.gelu(T.linear(x, w, b))), [x, w, b])

    def test_layer_norm_and_softmax(self):
        x, g, b = P((3, 6), 0, "x"), P((6,), 1, "g"), P((6,), 2, "b")
        mask = np.where(np.arange(6) > 3, -1e9, 0.0)
        probe = np.random.default_rng(9).standard_normal((3, 6))
        check(lambda: T.total(T.mul(T.softmax(T.layer_norm(x, g, b), mask=mask), Tensor(probe))), [x, g, b])

    def test_embedding_and_index_rows(self):
        w = P((6, 4), 0, "w")
        ids = np.array([[0, 3, 3], [5, 0, 1]])
        check(lambda: T.total(T.gelu(T.index_rows(T.reshape(T.embedding(w, ids), (6, 4)), [0, 2, 2, 5]))), [w])

    @pytest.mark.parametrize("smoothing", [0.0, 0.1])
    def test_cross_entropy(self, smoothing):
        z = P((5, 7), 0, "z")
        t = np.array([1, -100, 6, 0, 1])
        check(lambda: T.cross_entropy(z, t, label_smoothing=smoothing), [z])

    @pytest.mark.parametrize("self_attn", [True, False])
    def test_attention(self, self_attn):
        d, H = 8, 2
        x = P((2, 3, d), 0, "x")
        kv = x if self_attn else P((2, 4, d), 1, "kv")
        ws = [P((d, d) if i % 2 == 0 else (d,), 10 + i, f"w{i}", 0.5) for i in range(8)]
        S = kv.shape[1]
        mask = np.zeros((2, 1, 1, S))
        mask[1, ..., -1] = -1e9
        keep = (np.random.default_rng(3).random((2, H, 3, S)) > 0.2) / 0.8
        probe = Tensor(np.random.default_rng(4).standard_normal((2, 3, d)))
        params = [x] + ([] if self_attn else [kv]) + ws
        check(lambda: T.total(T.mul(T.attention(x, kv, tuple(ws), H, mask, keep), probe)), params)

    def test_attention_matches_composed_ops(self):
        d, H, B, L = 8, 2, 2, 3
        x = Tensor(np.random.default_rng(0).standard_normal((B, L, d)))
        ws = [np.random.default_rng(i).standard_normal((d, d) if i % 2 == 0 else (d,)) * 0.3 for i in range(8)]
        wq, bq, wk, bk, wv, bv, wo, bo = ws
        xd = x.data

        def heads(a):
            return a.reshape(B, L, H, d // H).transpose(0, 2, 1, 3)
        q, k, v = heads(xd @ wq + bq), heads(xd @ wk + bk), heads(xd @ wv + bv)
        p = T.softmax(Tensor(q @ k.transpose(0, 1, 3, 2) / math.sqrt(d // H))).data
        ref = (p @ v).transpose(0, 2, 1, 3).reshape(B, L, d) @ wo + bo
        got = T.attention(x, x, tuple(Tensor(w) for w in ws), H).data
        assert np.allclose(got, ref, atol=1e-12)


class TestAdam:
    def test_zero_grad_no_change(self):
        w = P((3,), 0, "w")
        before = w.data.copy()
        opt = Adam([w], lr=1e-3, clip_norm=0)
        opt.step()
        assert np.array_equal(w.data, before) and opt.state.step == 1

    def test_first_step(self):
        w = Parameter(np.array([0.0]), "w")
        w.grad[...] = 1.0
        Adam([w], lr=1e-4, clip_norm=0).step()
        assert w.data[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)

    def test_frozen_bit_exact(self):
        w = P((4,), 0, "w")
        w.trainable = False
        before = w.data.copy()
        w.grad[...] = 0
        other = P((4,), 1, "o")
        opt = Adam([w, other], lr=1e-2)
        for _ in range(5):
            T.total(T.mul(T.mul(w, other), other)).backward()
            opt.step()
        assert np.array_equal(w.data, before)
        assert "w" not in opt.state.m

    def test_clipping(self):
        w = Parameter(np.zeros(2), "w")
        opt = Adam([w], lr=1.0, clip_norm=1.0)
        w.grad[...] = [30.0, 40.0]
        assert opt.grad_norm() == pytest.approx(50.0)
        opt.step()
        # Adam's first step is sign-like, so clipping shows only through m/v; just check finiteness and zeroing
        assert np.isfinite(w.data).all() and not w.grad.any()


class TestSchedule:
    def test_points(self):
        assert inv_sqrt_lr(100, 1e-3, 100) == pytest.approx(1e-3)
        assert inv_sqrt_lr(50, 1e-3, 100) == pytest.approx(5e-4)
        assert inv_sqrt_lr(400, 1e-3, 100) == pytest.approx(5e-4)

    def test_bad_step(self):
        with pytest.raises(ValueError):
            inv_sqrt_lr(0, 1.0, 10)

    @given(st.integers(1, 10**6), st.integers(1, 10**4))
    def test_peak(self, step, warmup):
        assert inv_sqrt_lr(step, 1.0, warmup) <= 1.0 + 1e-12
