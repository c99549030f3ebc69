"""Reverse-mode gradients against finite differences and closed forms."""

import numpy as np
import pytest

from conftest import gapped_values, random_conv_case
from dcnet import autograd as ag
from dcnet import blocks, losses
from dcnet.autograd import OptimizerConfig, Parameter, Tape, Var
from dcnet.tensor import ConvSpec


def scalarize(y, rng):
    """Weighted sum with a random constant so every element matters."""
    return ag.sum_all(ag.mul_const(y, rng.normal(0, 1, y.data.shape)))


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        x = Var(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as t:
            t.backward(ag.sum_all(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_relu_dead_region_gradient_is_zero(self):
        x = Var(-np.abs(np.random.default_rng(0).normal(1, 0.1, (3, 3))),
                requires_grad=True)
        with Tape() as t:
            t.backward(ag.sum_all(ag.relu(x)))
        assert np.array_equal(x.grad, np.zeros((3, 3)))

    def test_non_scalar_root_defaults_to_ones_seed(self):
        x = Var(np.array([[1.0, -2.0], [3.0, -4.0]]), requires_grad=True)
        with Tape() as t:
            t.backward(ag.relu(x))
        assert np.array_equal(x.grad, np.array([[1.0, 0.0], [1.0, 0.0]]))

    def test_explicit_seed_scales_gradient(self):
        x = Var(np.ones((2, 2)), requires_grad=True)
        with Tape() as t:
            t.backward(ag.scale(x, 3.0), seed=np.full((2, 2), 0.5))
        assert np.array_equal(x.grad, np.full((2, 2), 1.5))

    def test_backward_preserves_forward_values(self):
        rng = np.random.default_rng(1)
        x = Var(rng.normal(0, 1, (2, 3)), requires_grad=True)
        with Tape() as t:
            y = ag.sigmoid(x)
            snapshot = y.data.copy()
            t.backward(ag.sum_all(y))
        assert np.array_equal(y.data, snapshot)

    def test_accumulation_is_additive_across_passes(self):
        x = Var(np.array([1.0, 2.0]), requires_grad=True)
        for _ in range(2):
            with Tape() as t:
                t.backward(ag.sum_all(ag.scale(x, 3.0)))
        assert np.array_equal(x.grad, np.array([6.0, 6.0]))

    def test_conv_bn_sigmoid_bce_chain_matches_fd(self):
        rng = np.random.default_rng(2)
        spec = ConvSpec(2, 2, kernel=3, padding=1)
        w = rng.normal(0, 0.5, spec.weight_shape)
        bn = blocks.BatchNorm2d(2)
        gt = (rng.random((1, 2, 4, 4)) > 0.5).astype(np.float64)

        def fn(xv, wv):
            y = ag.conv2d(xv, wv, None, spec)
            y = ag.batchnorm(y, bn.gamma, bn.beta, bn, training=True)
            return losses.bce(ag.sigmoid(y), gt)

        res = ag.grad_check(fn, [rng.normal(0, 1, (1, 2, 4, 4)), w],
                            names=["x", "w"])
        assert all(r.ok for r in res), [(r.name, r.rel_err) for r in res]


class TestGradCheckContract:
    def test_linear_function_error_is_tiny(self):
        rng = np.random.default_rng(3)
        res = ag.grad_check(lambda x: ag.sum_all(ag.scale(x, 2.0)),
                            [rng.normal(0, 1, (3, 3))])
        assert res[0].rel_err <= 1e-9

    def test_sigmoid_sum_at_zero(self):
        x = np.zeros((4,))
        res = ag.grad_check(lambda v: ag.sum_all(ag.sigmoid(v)), [x])
        assert res[0].ok
        with Tape() as t:
            xv = Var(x.copy(), requires_grad=True)
            t.backward(ag.sum_all(ag.sigmoid(xv)))
        assert np.allclose(xv.grad, 0.25, atol=1e-6)

    def test_non_scalar_target_raises(self):
        with pytest.raises(ValueError):
            ag.grad_check(lambda x: ag.relu(x), [np.zeros((2, 2))])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_reported_not_raised(self):
        res = ag.grad_check(lambda x: ag.log(x), [np.array(-0.5)])
        assert not res[0].ok

    def test_resaspp2_block(self):
        # seed chosen so no ReLU pre-activation sits within the FD step
        # of zero; central differences are meaningless across a kink
        rng = np.random.default_rng(101)
        blk = blocks.ResASPP2(blocks.ResASPP2Config(3, 2, 3),
                              np.random.default_rng(201))
        blk.eval()
        mask = rng.normal(0, 1, (1, 3, 6, 6))
        res = ag.grad_check(
            lambda xv: ag.sum_all(ag.mul_const(blk.forward(xv), mask)),
            [rng.normal(0, 1, (1, 3, 6, 6))])
        assert res[0].ok and res[0].rel_err <= 1e-3


class TestOpGradients:
    """One spot-check per op; the acceptance suite sweeps 20 instances."""

    def test_add_sub_affine_scale(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(0, 1, (2, 3)), rng.normal(0, 1, (2, 3))
        res = ag.grad_check(
            lambda x, y: scalarize(ag.affine(ag.sub(ag.add(x, y), y), 1.7, -0.3),
                                   np.random.default_rng(7)),
            [a, b])
        assert all(r.ok for r in res)

    def test_mul_const_and_div(self):
        rng = np.random.default_rng(8)
        c = rng.normal(0, 1, (2, 2))
        denom = rng.uniform(0.5, 2.0, (2, 2))
        res = ag.grad_check(
            lambda x: scalarize(ag.div(ag.mul_const(x, c), Var(denom)),
                                np.random.default_rng(9)),
            [rng.normal(0, 1, (2, 2))])
        assert all(r.ok for r in res)

    def test_mul_const_broadcast_up_rejected_at_backward(self):
        x = Var(np.zeros((2, 2)), requires_grad=True)
        with Tape() as t:
            y = ag.mul_const(x, np.zeros((3, 2, 2)))
            with pytest.raises(ValueError):
                t.backward(ag.sum_all(y))

    def test_clamp_passes_gradient_inside_blocks_outside(self):
        x = Var(np.array([0.1, 0.5, 0.9]), requires_grad=True)
        with Tape() as t:
            t.backward(ag.sum_all(ag.clamp(x, 0.25, 0.75)))
        assert np.array_equal(x.grad, np.array([0.0, 1.0, 0.0]))

    def test_log_and_clamp_fd(self):
        rng = np.random.default_rng(10)
        res = ag.grad_check(
            lambda x: scalarize(ag.log(ag.clamp(x, 0.05, 0.95)),
                                np.random.default_rng(11)),
            [rng.uniform(0.3, 0.7, (3, 3))])
        assert all(r.ok for r in res)

    def test_matmul_and_mean(self):
        rng = np.random.default_rng(12)
        res = ag.grad_check(
            lambda a, b: ag.mean_all(ag.matmul(a, b)),
            [rng.normal(0, 1, (3, 4)), rng.normal(0, 1, (4, 2))])
        assert all(r.ok for r in res)

    def test_concat(self):
        rng = np.random.default_rng(13)
        res = ag.grad_check(
            lambda a, b: scalarize(ag.concat([a, b]),
                                   np.random.default_rng(14)),
            [rng.normal(0, 1, (1, 2, 3, 3)), rng.normal(0, 1, (1, 1, 3, 3))])
        assert all(r.ok for r in res)

    def test_conv2d_grouped_strided(self):
        rng = np.random.default_rng(15)
        spec = ConvSpec(4, 6, kernel=3, stride=2, padding=2, dilation=2,
                        groups=2)
        x = rng.normal(0, 1, (2, 4, 7, 7))
        w = rng.normal(0, 0.5, spec.weight_shape)
        b = rng.normal(0, 0.5, 6)
        res = ag.grad_check(
            lambda xv, wv, bv: scalarize(ag.conv2d(xv, wv, bv, spec),
                                         np.random.default_rng(16)),
            [x, w, b], names=["x", "w", "b"])
        assert all(r.ok for r in res), [(r.name, r.rel_err) for r in res]

    def test_batchnorm_train_and_eval(self):
        rng = np.random.default_rng(17)
        for training in (True, False):
            state = blocks.BatchNorm2d(2)
            state.running_mean = rng.normal(0, 0.3, 2).astype(np.float32)
            state.running_var = rng.uniform(0.5, 1.5, 2).astype(np.float32)
            res = ag.grad_check(
                lambda xv, gv, bv: scalarize(
                    ag.batchnorm(xv, gv, bv, state, training),
                    np.random.default_rng(18)),
                [rng.normal(0, 1, (3, 2, 4, 4)), rng.normal(1, 0.2, 2),
                 rng.normal(0, 0.2, 2)],
                names=["x", "gamma", "beta"])
            assert all(r.ok for r in res), (training, [r.rel_err for r in res])

    def test_maxpool_first_max_wins_on_ties(self):
        x = Var(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
        with Tape() as t:
            t.backward(ag.sum_all(ag.maxpool2d(x, 2, 2)))
        assert np.array_equal(x.grad.reshape(4), np.array([1.0, 0, 0, 0]))

    def test_pool_gradients(self):
        rng = np.random.default_rng(19)
        x = gapped_values(rng, (1, 2, 6, 6))
        for op in (lambda v: ag.maxpool2d(v, 2, 2),
                   lambda v: ag.avgpool2d(v, 3, 3)):
            res = ag.grad_check(
                lambda v: scalarize(op(v), np.random.default_rng(20)), [x])
            assert res[0].ok, res[0].rel_err

    def test_upsample_bilinear(self):
        rng = np.random.default_rng(21)
        res = ag.grad_check(
            lambda v: scalarize(ag.upsample_bilinear(v, 7, 5),
                                np.random.default_rng(22)),
            [rng.normal(0, 1, (1, 2, 3, 4))])
        assert res[0].ok


class TestOptimizer:
    def _param(self, val):
        return Parameter(np.array(val, np.float64))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OptimizerConfig(lr=-0.1)
        with pytest.raises(ValueError):
            OptimizerConfig(lr=0.0)
        with pytest.raises(ValueError):
            OptimizerConfig(lr=0.1, momentum=1.0)

    def test_zero_gradient_leaves_params_unchanged(self):
        p = self._param([1.0, 2.0])
        p.grad = np.zeros(2)
        ag.sgd_step([p], OptimizerConfig(lr=0.1, momentum=0.9, weight_decay=0.0))
        assert np.array_equal(p.data, np.array([1.0, 2.0]))
        assert np.array_equal(p.velocity, np.zeros(2))
        assert p.grad is None

    def test_plain_sgd_without_momentum(self):
        p = self._param([1.0])
        p.grad = np.array([2.0])
        ag.sgd_step([p], OptimizerConfig(lr=0.1, momentum=0.0, weight_decay=0.0))
        assert np.allclose(p.data, [0.8])

    def test_two_steps_follow_momentum_recurrence(self):
        p = self._param([0.0])
        g, lr = 1.0, 0.1
        for _ in range(2):
            p.grad = np.array([g])
            ag.sgd_step([p], OptimizerConfig(lr=lr, momentum=0.9,
                                             weight_decay=0.0))
        assert np.allclose(p.data, [-lr * (g + 1.9 * g)])

    def test_weight_decay_enters_velocity(self):
        p = self._param([2.0])
        p.grad = np.array([0.0])
        ag.sgd_step([p], OptimizerConfig(lr=0.1, momentum=0.0, weight_decay=0.5))
        assert np.allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])

    def test_non_finite_gradient_raises(self):
        p = self._param([1.0])
        p.grad = np.array([np.nan])
        with pytest.raises(ag.TrainingDiverged):
            ag.sgd_step([p], OptimizerConfig(lr=0.1))
