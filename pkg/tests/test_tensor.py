"""Tensor-core op semantics: forward values, shape arithmetic, errors."""

import numpy as np
import pytest

from rppg.tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    avg_pool3d,
    batch_norm,
    conv3d,
    dense,
    global_spatial_avg,
    no_grad,
    relu,
)


class TestConv3d:
    def test_table_conv1_shape(self):
        # 64x64 input, 1x5x5 kernel, spatial padding 1 -> 62x62
        x = Tensor(np.zeros((1, 128, 64, 64, 3), np.float32))
        k = Tensor(np.zeros((1, 5, 5, 3, 16), np.float32))
        b = Tensor(np.zeros(16, np.float32))
        with no_grad():
            out = conv3d(x, k, b, padding=(0, 1, 1))
        assert out.shape == (1, 128, 62, 62, 16)

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 4, 5, 5, 1)))
        k = Tensor(np.ones((1, 1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = conv3d(x, k, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_counting_kernel(self):
        # all-ones 3x3x3 kernel on all-ones input counts its 27 taps
        x = Tensor(np.ones((1, 5, 5, 5, 1)))
        k = Tensor(np.ones((3, 3, 3, 1, 1)))
        b = Tensor(np.zeros(1))
        out = conv3d(x, k, b)
        assert out.shape == (1, 3, 3, 3, 1)
        np.testing.assert_allclose(out.data, 27.0)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((1, 3, 6, 6, 2)))
        y = Tensor(rng.standard_normal((1, 3, 6, 6, 2)))
        k = Tensor(rng.standard_normal((3, 3, 3, 2, 4)))
        b = Tensor(np.zeros(4))
        a_, b_ = 1.7, -0.4
        lhs = conv3d(Tensor(a_ * x.data + b_ * y.data), k, b, (1, 1, 1)).data
        rhs = a_ * conv3d(x, k, b, (1, 1, 1)).data + b_ * conv3d(y, k, b, (1, 1, 1)).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-9)

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((1, 2, 4, 4, 3)))
        k = Tensor(np.zeros((1, 1, 1, 2, 4)))
        with pytest.raises(ShapeError):
            conv3d(x, k, Tensor(np.zeros(4)))

    def test_kernel_exceeds_input(self):
        x = Tensor(np.zeros((1, 2, 4, 4, 1)))
        k = Tensor(np.zeros((3, 3, 3, 1, 1)))
        with pytest.raises(ShapeError):
            conv3d(x, k, Tensor(np.zeros(1)), padding=(0, 0, 0))

    def test_nonfinite_output(self):
        x = Tensor(np.full((1, 1, 2, 2, 1), 1e300))
        k = Tensor(np.full((1, 1, 1, 1, 1), 1e300))
        with pytest.raises(NonFiniteError):
            conv3d(x, k, Tensor(np.zeros(1)))


class TestAvgPool3d:
    @pytest.mark.parametrize("dim_in,dim_out", [(62, 31), (31, 15), (15, 7)])
    def test_floor_division(self, dim_in, dim_out):
        x = Tensor(np.zeros((1, 4, dim_in, dim_in, 2), np.float32))
        assert avg_pool3d(x).shape == (1, 4, dim_out, dim_out, 2)

    def test_constant_preserved(self):
        x = Tensor(np.full((1, 2, 6, 6, 3), 0.7))
        np.testing.assert_allclose(avg_pool3d(x).data, 0.7)

    def test_block_mean(self):
        block = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2, 1)
        assert avg_pool3d(Tensor(block)).item() == 2.5

    def test_window_too_large(self):
        x = Tensor(np.zeros((1, 2, 1, 4, 1)))
        with pytest.raises(ShapeError):
            avg_pool3d(x)


class TestBatchNorm:
    def _stats(self, c):
        return Tensor(np.zeros(c)), Tensor(np.ones(c))

    def test_constant_input_zeroed(self):
        rm, rv = self._stats(3)
        x = Tensor(np.full((2, 4, 3), 5.0))
        out = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True)
        assert np.max(np.abs(out.data)) <= 1e-3

    def test_two_value_channel(self):
        # mean 2, biased variance 1 -> +-1/sqrt(1 + eps)
        rm, rv = self._stats(1)
        x = Tensor(np.array([[1.0], [3.0]]))
        out = batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=True)
        expected = 1.0 / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data.reshape(-1), [-expected, expected], rtol=1e-9)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-3)

    def test_affine_map(self):
        rm, rv = self._stats(1)
        x = Tensor(np.array([[1.0], [3.0]]))
        out = batch_norm(x, Tensor(np.full(1, 2.0)), Tensor(np.full(1, 5.0)), rm, rv, training=True)
        np.testing.assert_allclose(out.data.reshape(-1), [3.0, 7.0], atol=1e-3)

    def test_running_stats_and_eval(self):
        rm, rv = self._stats(1)
        x = Tensor(np.array([[1.0], [3.0]]))
        g, b = Tensor(np.ones(1)), Tensor(np.zeros(1))
        batch_norm(x, g, b, rm, rv, training=True)
        # momentum 0.1 moves the buffers toward the batch statistics
        np.testing.assert_allclose(rm.data, [0.2])
        np.testing.assert_allclose(rv.data, [0.9 + 0.1 * 1.0])
        out = batch_norm(Tensor(np.array([[0.2]])), g, b, rm, rv, training=False)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_empty_batch(self):
        rm, rv = self._stats(2)
        with pytest.raises(ShapeError):
            batch_norm(Tensor(np.zeros((0, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)


class TestElementwise:
    def test_relu_cases(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(relu(Tensor([-3.0, -0.5])).data, [0.0, 0.0])
        x = np.array([0.1, 5.0])
        np.testing.assert_array_equal(relu(Tensor(x)).data, x)

    def test_no_nan_from_bounded_inputs(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            x = Tensor(rng.uniform(-1e3, 1e3, (3, 4)), requires_grad=True)
            y = Tensor(rng.uniform(-1e3, 1e3, (3, 4)), requires_grad=True)
            out = ((x * y + x - y).abs() + 1.0).log().mean()
            out.backward()
            assert np.isfinite(out.data).all()
            assert np.isfinite(x.grad).all() and np.isfinite(y.grad).all()


class TestDense:
    def test_per_step_shape(self):
        x = Tensor(np.zeros((1, 128, 64), np.float32))
        out = dense(x, Tensor(np.zeros((64, 1), np.float32)), Tensor(np.zeros(1, np.float32)))
        assert out.shape == (1, 128, 1)

    def test_identity(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 5, 4)))
        out = dense(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, x.data, rtol=1e-12)

    def test_sum_weights(self):
        x = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
        out = dense(x, Tensor(np.ones((3, 1))), Tensor(np.array([0.25])))
        np.testing.assert_allclose(out.data, [[[6.25]]])

    def test_same_map_each_step(self):
        rng = np.random.default_rng(4)
        w = Tensor(rng.standard_normal((4, 2)))
        b = Tensor(rng.standard_normal(2))
        row = rng.standard_normal(4)
        x = Tensor(np.stack([row, row])[None])
        out = dense(x, w, b)
        np.testing.assert_allclose(out.data[0, 0], out.data[0, 1], rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dense(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((4, 1))), Tensor(np.zeros(1)))


class TestGlobalSpatialAvg:
    def test_squeeze_shape(self):
        x = Tensor(np.zeros((1, 128, 7, 7, 64), np.float32))
        assert global_spatial_avg(x).shape == (1, 128, 64)

    def test_constant(self):
        x = Tensor(np.full((1, 3, 4, 4, 2), 1.25))
        np.testing.assert_allclose(global_spatial_avg(x).data, 1.25)

    def test_plane_mean(self):
        plane = np.array([[0.0, 2.0], [4.0, 6.0]]).reshape(1, 1, 2, 2, 1)
        assert global_spatial_avg(Tensor(plane)).item() == 3.0


class TestAutodiffBasics:
    def test_detach_blocks_grad(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = (x.detach() * x).sum()
        y.backward()
        np.testing.assert_allclose(x.grad, [2.0])  # only the live branch

    def test_backward_needs_scalar(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_grad_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x.sum() + (x * 3.0).sum()).backward()
        np.testing.assert_allclose(x.grad, [4.0, 4.0])

    def test_no_grad_suppresses_graph(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert y._backward is None and not y.requires_grad
