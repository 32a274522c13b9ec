import math

import numpy as np
import pytest

from crossgen.autodiff import ParamStore, Tensor, adam_step, backward, no_grad
from crossgen.autodiff import functional as F
from crossgen.autodiff.functional import DimensionError

from oracles import conv2d_loops, matvec_loops, maxpool_loops


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestConv2d:
    def test_table1_first_layer_shape(self):
        x = Tensor(np.zeros((1, 48, 48)))
        w = Tensor(np.zeros((64, 1, 4, 4)))
        assert F.conv2d(x, w, stride=2, padding=1).shape == (64, 24, 24)

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(1, 7, 5)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(F.conv2d(x, w).data, x.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 5, 5))
        w = rng.normal(size=(2, 1, 3, 3))
        out = F.conv2d(t64(x), t64(w)).data
        np.testing.assert_allclose(out, conv2d_loops(x, w), rtol=1e-6)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 0), (3, 2)])
    def test_matches_loop_oracle_strided(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.normal(size=(3, 9, 8))
        w = rng.normal(size=(4, 3, 4, 4))
        out = F.conv2d(t64(x), t64(w), stride=stride, padding=padding).data
        np.testing.assert_allclose(out, conv2d_loops(x, w, stride, padding), rtol=1e-6, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(np.zeros((2, 8, 8))), Tensor(np.zeros((4, 3, 3, 3))))

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 4, 4))))


class TestConvTranspose2d:
    def test_table1_decoder_chain(self):
        x = Tensor(np.zeros((128, 7, 7)))
        h = F.conv_transpose2d(x, Tensor(np.zeros((128, 64, 4, 4))), stride=2, padding=1)
        assert h.shape == (64, 14, 14)
        out = F.conv_transpose2d(h, Tensor(np.zeros((64, 1, 4, 4))), stride=2, padding=1)
        assert out.shape == (1, 28, 28)

    def test_table2_decoder_chain(self):
        x = Tensor(np.zeros((64, 1, 1)))
        sizes = []
        for c_in, c_out, k in [(64, 512, 3), (512, 256, 3), (256, 128, 2), (128, 1, 2)]:
            x = F.conv_transpose2d(x, Tensor(np.zeros((c_in, c_out, k, k))), stride=2)
            sizes.append(x.shape[-1])
        assert sizes == [3, 7, 14, 28]

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 4), (2, 0, 3), (3, 1, 5)])
    def test_adjoint_identity(self, stride, padding, k):
        rng = np.random.default_rng(k + stride)
        # sizes chosen so conv_transpose exactly inverts the conv shape (no output padding)
        h, wd = (5 - 1) * stride - 2 * padding + k, (4 - 1) * stride - 2 * padding + k
        w = rng.normal(size=(3, 2, k, k))
        x = rng.normal(size=(2, 2, h, wd))
        cx = F.conv2d(t64(x), t64(w), stride=stride, padding=padding).data
        assert cx.shape == (2, 3, 5, 4)
        y = rng.normal(size=cx.shape)
        # conv weight is [C_out, C_in, k, k]; the transposed op reads the same array as [C_in', C_out'].
        aty = F.conv_transpose2d(t64(y), t64(w), stride=stride, padding=padding).data
        lhs, rhs = np.sum(cx * y), np.sum(x * aty)
        assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))

    def test_negative_extent(self):
        with pytest.raises(DimensionError):
            F.conv_transpose2d(Tensor(np.zeros((1, 1, 1))), Tensor(np.zeros((1, 1, 2, 2))), stride=1, padding=2)


class TestDense:
    def test_identity(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]))
        out = F.dense(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_sum(self):
        out = F.dense(Tensor(np.array([1.0, 2.0, 3.0])), Tensor(np.ones((1, 3))), Tensor(np.zeros(1)))
        assert out.data.tolist() == [6.0]

    def test_matches_matvec_oracle(self):
        rng = np.random.default_rng(3)
        w, x, b = rng.normal(size=(4, 8)), rng.normal(size=8), rng.normal(size=4)
        np.testing.assert_allclose(F.dense(t64(x), t64(w), t64(b)).data, matvec_loops(w, x, b), rtol=1e-6)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            F.dense(Tensor(np.zeros(4)), Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


class TestBatchNorm:
    def _run(self, x, training=True):
        c = x.shape[1]
        rm, rv = np.zeros(c, x.dtype), np.ones(c, x.dtype)
        return F.batchnorm(Tensor(x), t64(np.ones(c)), t64(np.zeros(c)), rm, rv, training), rm, rv

    def test_constant_channel_is_zero(self):
        out, _, _ = self._run(np.full((4, 2, 3, 3), 7.0))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_closed_form_pair(self):
        x = np.array([[-1.0, -1.0], [1.0, 1.0]])
        out, _, _ = self._run(x)
        expected = np.array([[-1.0, -1.0], [1.0, 1.0]]) / math.sqrt(1 + 1e-5)
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_train_mean_is_zero(self):
        x = np.random.default_rng(4).normal(3.0, 2.0, size=(16, 5, 4, 4))
        out, _, _ = self._run(x)
        assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-6
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)

    def test_running_stats_momentum(self):
        x = np.random.default_rng(5).normal(2.0, 1.0, size=(8, 3))
        _, rm, rv = self._run(x)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1))

    def test_eval_uses_running_stats(self):
        x = np.random.default_rng(6).normal(size=(3, 2))
        rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
        out = F.batchnorm(Tensor(x), t64(np.ones(2)), t64(np.zeros(2)), rm, rv, training=False)
        np.testing.assert_allclose(out.data, (x - rm) / np.sqrt(rv + 1e-5))

    def test_batch_of_one_rejected_in_train(self):
        with pytest.raises(ValueError):
            self._run(np.zeros((1, 3)))


class TestActivations:
    def test_relu(self):
        assert F.relu(Tensor(np.array([-3.0, 3.0]))).data.tolist() == [0.0, 3.0]

    def test_leaky_relu(self):
        assert F.leaky_relu(Tensor(np.array([-1.0])), 0.2).data[0] == pytest.approx(-0.2)

    def test_softmax_zeros(self):
        np.testing.assert_allclose(F.softmax(Tensor(np.zeros(10))).data, 0.1, rtol=1e-6)

    def test_sigmoid_extremes_stay_finite(self):
        out = F.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0], dtype=np.float32))).data
        assert np.all(np.isfinite(out))
        assert out[1] == 0.5

    def test_dispatch(self):
        assert F.activation(Tensor(np.array([-1.0])), "relu").data[0] == 0.0
        with pytest.raises(ValueError):
            F.activation(Tensor(np.array([1.0])), "tanh")


class TestMaxPool:
    def test_two_by_two(self):
        assert F.maxpool2d(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])), 2, 2).data.item() == 4.0

    def test_constant(self):
        out = F.maxpool2d(Tensor(np.full((2, 6, 6), 3.0)), 2, 2)
        np.testing.assert_array_equal(out.data, 3.0)

    @pytest.mark.parametrize("k,stride", [(2, 2), (3, 1), (3, 2)])
    def test_matches_window_oracle(self, k, stride):
        x = np.random.default_rng(k * 7 + stride).normal(size=(2, 6, 6))
        np.testing.assert_array_equal(F.maxpool2d(t64(x), k, stride).data, maxpool_loops(x, k, stride))

    def test_tie_gradient_goes_to_first(self):
        x = t64(np.ones((1, 2, 2)))
        backward(F.maxpool2d(x, 2, 2).sum())
        assert x.grad.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]

    def test_window_too_large(self):
        with pytest.raises(DimensionError):
            F.maxpool2d(Tensor(np.zeros((1, 2, 2))), 3)


class TestBackward:
    def test_sum_gives_ones(self):
        x = t64(np.random.default_rng(0).normal(size=(3, 4)))
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sigmoid_derivative_at_zero(self):
        w, x = t64([0.0]), t64([1.0], grad=False)
        backward(F.sigmoid(w * x).sum())
        assert w.grad[0] == pytest.approx(0.25)

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            backward(t64(np.zeros(3)) * 2.0)

    def test_unreachable_params_get_zero_grad(self):
        a, b = t64([1.0, 2.0]), t64([3.0])
        backward((a * a).sum(), params=[a, b])
        np.testing.assert_array_equal(a.grad, [2.0, 4.0])
        np.testing.assert_array_equal(b.grad, [0.0])

    def test_shared_subexpression_accumulates(self):
        x = t64([3.0])
        y = x * x
        backward((y + y).sum())
        assert x.grad[0] == pytest.approx(12.0)

    def test_no_grad_records_nothing(self):
        x = t64([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad


class TestAdam:
    def _store(self, value, grad):
        store = ParamStore()
        p = store.add("w", np.array(value, dtype=np.float64))
        p.grad = np.array(grad, dtype=np.float64)
        return store, p

    def test_first_step_moves_by_lr(self):
        store, p = self._store([1.0, -2.0, 0.5], [1.0, 1.0, 1.0])
        adam_step(store, lr=1e-3)
        # m_hat = g and v_hat = g^2 after bias correction, so the step is lr * g/(|g| + eps)
        np.testing.assert_allclose(p.data, np.array([1.0, -2.0, 0.5]) - 1e-3 / (1 + 1e-8), rtol=1e-12)
        assert p.grad is None and store.step_count == 1

    def test_zero_grad_leaves_params(self):
        store, p = self._store([1.0, 2.0], [0.0, 0.0])
        adam_step(store, lr=1e-3)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        assert store.step_count == 1

    def test_two_steps_monotone(self):
        store, p = self._store([1.0], [0.5])
        adam_step(store, lr=1e-2)
        first = p.data.copy()
        p.grad = np.array([0.5])
        adam_step(store, lr=1e-2)
        # constant gradient: m_hat = g, v_hat = g^2 at every step
        assert first[0] == pytest.approx(1.0 - 1e-2, rel=1e-9)
        assert p.data[0] == pytest.approx(1.0 - 2e-2, rel=1e-9)

    def test_missing_gradient(self):
        store = ParamStore()
        store.add("w", np.zeros(2))
        with pytest.raises(ValueError, match="no gradient"):
            adam_step(store, lr=1e-3)

    def test_moments_match_shapes(self):
        store = ParamStore()
        store.add("a", np.zeros((2, 3)))
        store.add("b", np.zeros(4))
        for name in store.names():
            assert store.adam_m[name].shape == store[name].shape == store.adam_v[name].shape


def test_deterministic_forward():
    def run():
        rng = np.random.default_rng(123)
        x = Tensor(rng.normal(size=(4, 1, 12, 12)).astype(np.float32))
        w = Tensor(rng.normal(size=(8, 1, 4, 4)).astype(np.float32))
        return F.conv2d(x, w, stride=2, padding=1).data.tobytes()

    assert run() == run()
