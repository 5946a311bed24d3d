import numpy as np
import pytest

from shopmatch import nn
from shopmatch.errors import ContractViolation, ParameterError, ShapeError
from shopmatch.rng import stream


def quadratic(pred, target):
    diff = pred - target
    return 0.5 * float((diff * diff).sum()), diff


def binary_xent(pred, target):
    value = -float((target * np.log(pred) + (1 - target) * np.log(1 - pred)).sum())
    dpred = (pred - target) / (pred * (1 - pred))
    return value, dpred


class TestDense:
    def test_identity_weights(self):
        layer = nn.Dense(np.eye(2, dtype=np.float32), np.zeros(2, dtype=np.float32))
        x = np.array([[1.0, -2.0]], dtype=np.float32)
        np.testing.assert_array_equal(layer.forward(x), x)

    def test_hand_computed(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        b = np.array([0.5, -0.5], dtype=np.float32)
        x = np.array([[1.0, 1.0]], dtype=np.float32)
        got = nn.Dense(w, b).forward(x)
        np.testing.assert_allclose(got, [[3.5, 6.5]], rtol=0, atol=0)

    def test_zero_weights_broadcast_bias(self):
        w = np.zeros((3, 4), dtype=np.float32)
        b = np.array([1.0, -2.0, 0.25], dtype=np.float32)
        x = stream(0, "t").standard_normal((5, 4)).astype(np.float32)
        got = nn.Dense(w, b).forward(x)
        np.testing.assert_array_equal(got, np.tile(b, (5, 1)))

    def test_shape_mismatch(self):
        layer = nn.Dense(np.eye(3, dtype=np.float32), np.zeros(3, dtype=np.float32))
        with pytest.raises(ShapeError):
            layer.forward(np.zeros((2, 4), dtype=np.float32))


class TestActivations:
    def test_sigmoid_zero(self):
        got = nn.sigmoid(np.array([0.0], dtype=np.float32))
        assert got[0] == 0.5

    def test_sigmoid_minus_one(self):
        # 1 / (1 + e)
        got = nn.sigmoid(np.array([-1.0]))
        np.testing.assert_allclose(got[0], 0.2689414213699951, rtol=1e-12)

    def test_relu_definition(self):
        got = nn.relu(np.array([-1.0, 0.0, 3.0]))
        np.testing.assert_array_equal(got, [0.0, 0.0, 3.0])

    def test_sigmoid_open_interval(self):
        x = np.array([-1e4, -50.0, 0.0, 50.0, 1e4], dtype=np.float32)
        y = nn.sigmoid(x)
        assert np.all(y > 0.0) and np.all(y < 1.0)

    def test_relu_nonnegative(self):
        x = stream(1, "relu").standard_normal(1000).astype(np.float32)
        assert np.all(nn.relu(x) >= 0)


class TestBatchNorm:
    def test_constant_columns_give_zero(self):
        bn = nn.BatchNorm.init(3)
        x = np.full((8, 3), 7.0, dtype=np.float32)
        out = bn.forward(x, mode=nn.TRAIN)
        np.testing.assert_allclose(out, 0.0, atol=1e-6)

    def test_two_point_column(self):
        bn = nn.BatchNorm.init(1)
        x = np.array([[-1.0], [1.0]], dtype=np.float32)
        out = bn.forward(x, mode=nn.TRAIN)
        expected = 1.0 / np.sqrt(1.0 + bn.epsilon)
        np.testing.assert_allclose(out[:, 0], [-expected, expected], rtol=1e-6)

    def test_infer_identity_stats(self):
        bn = nn.BatchNorm.init(4)
        x = stream(2, "bn").standard_normal((6, 4)).astype(np.float32)
        out = bn.forward(x, mode=nn.INFER)
        np.testing.assert_allclose(out, x / np.sqrt(np.float32(1.0) + np.float32(bn.epsilon)), rtol=1e-6)

    def test_batch_of_one_rejected(self):
        bn = nn.BatchNorm.init(2)
        with pytest.raises(ContractViolation):
            bn.forward(np.zeros((1, 2), dtype=np.float32), mode=nn.TRAIN)

    def test_train_standardizes(self):
        # columns of a batch >= 16: mean ~ 0, variance ~ 1 before gamma/beta
        bn = nn.BatchNorm.init(5)
        x = (stream(3, "bn2").standard_normal((64, 5)) * 3.0 + 1.5).astype(np.float32)
        out = bn.forward(x, mode=nn.TRAIN)
        assert np.all(np.abs(out.mean(axis=0)) < 1e-5)
        assert np.all(np.abs(out.var(axis=0) - 1.0) < 1e-3)

    def test_running_stats_update(self):
        bn = nn.BatchNorm.init(1)
        x = np.array([[0.0], [2.0]], dtype=np.float32)  # mean 1, biased var 1
        bn.forward(x, mode=nn.TRAIN)
        np.testing.assert_allclose(bn.running_mean, [0.1], rtol=1e-6)
        np.testing.assert_allclose(bn.running_var, [1.0], rtol=1e-6)


class TestDropout:
    def test_infer_is_identity(self):
        layer = nn.Dropout(0.5)
        x = stream(4, "drop").standard_normal((3, 3)).astype(np.float32)
        np.testing.assert_array_equal(layer.forward(x, mode=nn.INFER), x)

    def test_train_needs_rng(self):
        with pytest.raises(ContractViolation):
            nn.Dropout(0.5).forward(np.zeros((2, 2), dtype=np.float32), mode=nn.TRAIN)

    def test_inverted_scaling_preserves_mean(self):
        layer = nn.Dropout(0.3)
        x = np.ones((2000, 50), dtype=np.float32)
        out = layer.forward(x, mode=nn.TRAIN, rng=stream(5, "drop"))
        assert abs(out.mean() - 1.0) < 0.02
        kept = out[out != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.7, rtol=1e-6)

    def test_bad_rate(self):
        with pytest.raises(ParameterError):
            nn.Dropout(1.0)


class TestStackForward:
    def _stack(self):
        r = stream(7, "init")
        return nn.Stack(
            [
                nn.Dense.init(6, 8, r),
                nn.ReLU(),
                nn.Dense.init(8, 3, r),
                nn.Sigmoid(),
            ]
        )

    def test_infer_is_pure(self):
        stk = self._stack()
        x = stream(8, "x").standard_normal((4, 6)).astype(np.float32)
        a = stk.forward(x, mode=nn.INFER)
        b = stk.forward(x, mode=nn.INFER)
        assert np.array_equal(a, b)

    def test_outputs_finite(self):
        stk = self._stack()
        x = stream(9, "x").standard_normal((16, 6)).astype(np.float32)
        out = stk.forward(x, mode=nn.TRAIN, rng=stream(9, "d"))
        assert np.all(np.isfinite(out))


class TestGradientCheck:
    def test_single_dense_quadratic(self):
        r = stream(10, "init")
        stk = nn.Stack([nn.Dense.init(4, 3, r)])
        x = r.standard_normal((5, 4)).astype(np.float32)
        t = r.standard_normal((5, 3)).astype(np.float32)
        err = nn.gradient_check(stk, x, t, quadratic)
        assert err < 1e-6

    def test_two_layer_relu_xent(self):
        r = stream(11, "init")
        stk = nn.Stack(
            [
                nn.Dense.init(5, 8, r),
                nn.ReLU(),
                nn.Dense.init(8, 1, r),
                nn.Sigmoid(),
            ]
        )
        x = r.standard_normal((6, 5)).astype(np.float32)
        t = (r.random((6, 1)) < 0.5).astype(np.float64)
        err = nn.gradient_check(stk, x, t, binary_xent)
        assert err < 1e-3

    def test_batchnorm_graph(self):
        r = stream(12, "init")
        stk = nn.Stack(
            [
                nn.BatchNorm.init(4),
                nn.Dense.init(4, 6, r),
                nn.ReLU(),
                nn.Dense.init(6, 2, r),
            ]
        )
        x = r.standard_normal((8, 4)).astype(np.float32)
        t = r.standard_normal((8, 2)).astype(np.float32)
        err = nn.gradient_check(stk, x, t, quadratic)
        assert err < 1e-3

    def test_active_dropout_rejected(self):
        r = stream(13, "init")
        stk = nn.Stack([nn.Dense.init(3, 3, r), nn.Dropout(0.5)])
        x = np.zeros((2, 3), dtype=np.float32)
        with pytest.raises(ContractViolation):
            nn.gradient_check(stk, x, x, quadratic)

    def test_h_out_of_range(self):
        stk = nn.Stack([nn.Dense.init(2, 2, stream(14, "i"))])
        x = np.zeros((2, 2), dtype=np.float32)
        with pytest.raises(ParameterError):
            nn.gradient_check(stk, x, x, quadratic, h=1e-6)
