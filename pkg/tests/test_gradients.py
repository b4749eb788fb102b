"""Central finite-difference verification of every differentiable op.

All checks run in double precision on small random instances (at least 5
per op) and must stay under 1e-4 relative error; the whole module is also
acceptance criterion 1, so it has to finish well inside 2 CPU-minutes.
"""

import numpy as np
import pytest

from rppg.losses import ContrastiveBatch, Stage2Config, ntxent_loss, simsiam_loss, smooth_l1, stage2_loss
from rppg.models import RppgOutputs
from rppg.tensor import (
    Tensor,
    avg_pool3d,
    batch_norm,
    conv3d,
    dense,
    finite_diff_check,
    global_spatial_avg,
    relu,
)

TOL = 1e-4
N_INSTANCES = 5


def _t(rng, shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


@pytest.mark.parametrize("instance", range(N_INSTANCES))
class TestOpGradients:
    def test_conv3d(self, instance):
        rng = np.random.default_rng(100 + instance)
        x = _t(rng, (1, 4, 5, 5, 2))
        k = _t(rng, (3, 3, 3, 2, 3), scale=0.4)
        b = _t(rng, (3,), scale=0.2)
        err = finite_diff_check(lambda *a: conv3d(*a, padding=(1, 1, 1)), [x, k, b], seed=instance)
        assert err < TOL

    def test_conv3d_spatial_kernel(self, instance):
        rng = np.random.default_rng(200 + instance)
        x = _t(rng, (1, 3, 7, 7, 2))
        k = _t(rng, (1, 5, 5, 2, 3), scale=0.3)
        b = _t(rng, (3,), scale=0.2)
        err = finite_diff_check(lambda *a: conv3d(*a, padding=(0, 1, 1)), [x, k, b], seed=instance)
        assert err < TOL

    def test_avg_pool3d(self, instance):
        rng = np.random.default_rng(300 + instance)
        x = _t(rng, (2, 3, 6, 7, 2))
        assert finite_diff_check(avg_pool3d, [x], seed=instance) < TOL

    def test_batch_norm_train(self, instance):
        rng = np.random.default_rng(400 + instance)
        x = _t(rng, (2, 5, 3))
        g = _t(rng, (3,))
        b = _t(rng, (3,))

        def fn(x, g, b):
            stats = (Tensor(np.zeros(3)), Tensor(np.ones(3)))
            return batch_norm(x, g, b, *stats, training=True)

        assert finite_diff_check(fn, [x, g, b], seed=instance) < TOL

    def test_batch_norm_eval(self, instance):
        rng = np.random.default_rng(500 + instance)
        x = _t(rng, (2, 4, 3))
        g = _t(rng, (3,))
        b = _t(rng, (3,))
        rm = Tensor(rng.standard_normal(3))
        rv = Tensor(rng.uniform(0.5, 2.0, 3))
        err = finite_diff_check(lambda *a: batch_norm(*a, rm, rv, training=False), [x, g, b], seed=instance)
        assert err < TOL

    def test_relu_away_from_zero(self, instance):
        rng = np.random.default_rng(600 + instance)
        raw = rng.standard_normal((4, 5))
        raw = np.where(np.abs(raw) < 0.1, raw + 0.3 * np.sign(raw + 1e-12), raw)
        x = Tensor(raw, requires_grad=True, dtype=np.float64)
        assert finite_diff_check(relu, [x], eps=1e-6, seed=instance) < 1e-6

    def test_dense(self, instance):
        rng = np.random.default_rng(700 + instance)
        x = _t(rng, (2, 6, 4))
        w = _t(rng, (4, 3))
        b = _t(rng, (3,))
        assert finite_diff_check(dense, [x, w, b], seed=instance) < 1e-5

    def test_global_spatial_avg(self, instance):
        rng = np.random.default_rng(800 + instance)
        x = _t(rng, (1, 3, 4, 5, 2))
        assert finite_diff_check(global_spatial_avg, [x], seed=instance) < TOL

    def test_elementwise_chain(self, instance):
        rng = np.random.default_rng(900 + instance)
        x = _t(rng, (3, 4))
        y = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True, dtype=np.float64)

        def fn(x, y):
            return ((x * y + x / y - y).abs() + 1.0).log().exp().sqrt().mean()

        assert finite_diff_check(fn, [x, y], seed=instance) < TOL

    def test_matmul_reductions(self, instance):
        rng = np.random.default_rng(1000 + instance)
        a = _t(rng, (4, 3))
        b = _t(rng, (3, 5))

        def fn(a, b):
            m = a @ b
            return (m.sum(axis=0) * m.mean(axis=1).sum()).sum() + m.t().reshape(20).mean()

        assert finite_diff_check(fn, [a, b], seed=instance) < TOL


@pytest.mark.parametrize("instance", range(N_INSTANCES))
class TestLossGradients:
    def test_ntxent(self, instance):
        rng = np.random.default_rng(1100 + instance)
        z = _t(rng, (6, 4))
        positives = np.array([3, 4, 5, 0, 1, 2])
        err = finite_diff_check(lambda z: ntxent_loss(ContrastiveBatch(z, positives, tau=0.3)), [z], seed=instance)
        assert err < TOL

    def test_smooth_l1(self, instance):
        rng = np.random.default_rng(1200 + instance)
        pred = _t(rng, (2, 16))
        target = Tensor(rng.standard_normal((2, 16)))
        # keep residuals away from the |d| = beta joint so the finite
        # difference never straddles the branch switch
        mask = np.abs(pred.data - target.data - 1.0) < 2e-3
        pred.data[mask] += 0.01
        err = finite_diff_check(lambda p: smooth_l1(p, target, 1.0), [pred], seed=instance)
        assert err < TOL

    def test_simsiam_predictor_side(self, instance):
        rng = np.random.default_rng(1300 + instance)
        p_m, p_n = _t(rng, (3, 4)), _t(rng, (3, 4))
        z_m, z_n = _t(rng, (3, 4)), _t(rng, (3, 4))
        err = finite_diff_check(lambda a, b: simsiam_loss(a, z_m, b, z_n), [p_m, p_n], seed=instance)
        assert err < TOL

    def test_stage2(self, instance):
        rng = np.random.default_rng(1400 + instance)
        p_out = _t(rng, (2, 12))
        taps = {i: _t(rng, (2, 12)) for i in (5, 6, 7)}
        target = Tensor(rng.standard_normal((2, 12)))

        def fn(p, t5, t6, t7):
            outs = RppgOutputs(p_out=p, taps={5: t5, 6: t6, 7: t7})
            return stage2_loss(outs, target, Stage2Config(beta=1.0, alpha=0.5))

        err = finite_diff_check(fn, [p_out, taps[5], taps[6], taps[7]], seed=instance)
        assert err < TOL


class TestStopGradientContract:
    def test_simsiam_projection_grads_exactly_zero(self):
        rng = np.random.default_rng(42)
        p_m, p_n = _t(rng, (3, 4)), _t(rng, (3, 4))
        z_m, z_n = _t(rng, (3, 4)), _t(rng, (3, 4))
        loss = simsiam_loss(p_m, z_m, p_n, z_n)
        loss.backward()
        assert z_m.grad is None or not np.any(z_m.grad)
        assert z_n.grad is None or not np.any(z_n.grad)
        assert np.any(p_m.grad) and np.any(p_n.grad)


class TestDirectionalBehavior:
    def test_ntxent_rewards_positive_similarity(self):
        # pushing a positive pair together (all else fixed) lowers the loss
        rng = np.random.default_rng(5)
        z = rng.standard_normal((4, 3))
        z[1] = z[0] + 0.5 * rng.standard_normal(3)
        positives = np.array([1, 0, 3, 2])

        def loss_at(t):
            zt = z.copy()
            zt[1] = (1 - t) * zt[1] + t * zt[0]  # slide z1 toward z0
            return ntxent_loss(ContrastiveBatch(Tensor(zt), positives, tau=0.5)).item()

        assert loss_at(0.2) < loss_at(0.0)
