"""Tensor-core operations against loop oracles and closed forms."""

import numpy as np
import pytest

import oracles
from conftest import gapped_values, random_conv_case
from dcnet import tensor
from dcnet.tensor import ConvSpec


class TestConvSpec:
    def test_out_size_matches_realized_shape(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            spec, x, w, b = random_conv_case(rng)
            out = tensor.conv2d(x, w, b, spec)
            assert out.shape[2:] == spec.out_size(x.shape[2], x.shape[3])

    def test_too_small_input_raises(self):
        spec = ConvSpec(1, 1, kernel=5)
        with pytest.raises(ValueError):
            spec.out_size(3, 3)

    def test_invalid_configs_raise(self):
        with pytest.raises(ValueError):
            ConvSpec(0, 1)
        with pytest.raises(ValueError):
            ConvSpec(3, 4, groups=2)
        with pytest.raises(ValueError):
            ConvSpec(2, 2, stride=0)
        with pytest.raises(ValueError):
            ConvSpec(2, 2, padding=-1)

    def test_weight_shape_and_patch_rows(self):
        spec = ConvSpec(6, 8, kernel=(3, 5), groups=2)
        assert spec.weight_shape == (8, 3, 3, 5)
        assert spec.patch_rows == 6 * 15


class TestUnfold:
    def test_identity_patch(self):
        x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
        cols = tensor.unfold(x, ConvSpec(1, 1, kernel=1))
        assert np.array_equal(cols, x.reshape(1, 1, 9))

    def test_constant_field(self):
        x = np.ones((1, 1, 5, 5), np.float32)
        cols = tensor.unfold(x, ConvSpec(1, 1, kernel=3))
        assert cols.shape == (1, 9, 9)
        assert np.array_equal(cols, np.ones((1, 9, 9), np.float32))

    def test_dilated_matches_gather_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(0, 1, (1, 2, 8, 8))
        spec = ConvSpec(2, 1, kernel=3, dilation=2, padding=2)
        assert np.allclose(tensor.unfold(x, spec),
                           oracles.unfold_gather_loops(x, spec), atol=1e-12)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError):
            tensor.unfold(np.zeros((1, 2, 4, 4)), ConvSpec(3, 1, kernel=1))

    def test_fold_unfold_roundtrip_1x1(self):
        rng = np.random.default_rng(2)
        x = rng.normal(0, 1, (2, 3, 5, 5)).astype(np.float32)
        spec = ConvSpec(3, 1, kernel=1)
        cols = tensor.unfold(x, spec)
        assert np.array_equal(tensor.fold(cols, spec, (5, 5)), x)


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(3)
        x = rng.normal(0, 1, (1, 1, 4, 4)).astype(np.float32)
        w = np.ones((1, 1, 1, 1), np.float32)
        b = np.zeros(1, np.float32)
        out = tensor.conv2d(x, w, b, ConvSpec(1, 1, kernel=1))
        assert np.allclose(out, x, atol=1e-7)

    def test_all_ones_box(self):
        x = np.ones((1, 1, 5, 5), np.float32)
        w = np.ones((1, 1, 3, 3), np.float32)
        out = tensor.conv2d(x, w, None, ConvSpec(1, 1, kernel=3))
        assert out.shape == (1, 1, 3, 3)
        assert np.allclose(out, 9.0)

    def test_dilated_grouped_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        spec = ConvSpec(4, 2, kernel=3, dilation=3, padding=3, groups=2)
        x = rng.normal(0, 1, (2, 4, 9, 9)).astype(np.float32)
        w = rng.normal(0, 0.5, spec.weight_shape).astype(np.float32)
        b = rng.normal(0, 0.5, 2).astype(np.float32)
        got = tensor.conv2d(x, w, b, spec)
        assert np.abs(got - oracles.conv2d_loops(x, w, b, spec)).max() <= 1e-5

    def test_random_configs_match_loop_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            spec, x, w, b = random_conv_case(rng)
            got = tensor.conv2d(x, w, b, spec)
            assert np.abs(got - oracles.conv2d_loops(x, w, b, spec)).max() <= 1e-5

    def test_linearity_without_bias(self):
        rng = np.random.default_rng(6)
        spec = ConvSpec(3, 4, kernel=3, padding=1)
        w = rng.normal(0, 0.5, spec.weight_shape).astype(np.float32)
        x = rng.normal(0, 1, (1, 3, 6, 6)).astype(np.float32)
        y = rng.normal(0, 1, (1, 3, 6, 6)).astype(np.float32)
        lhs = tensor.conv2d(2.0 * x + 0.5 * y, w, None, spec)
        rhs = (2.0 * tensor.conv2d(x, w, None, spec)
               + 0.5 * tensor.conv2d(y, w, None, spec))
        assert np.abs(lhs - rhs).max() <= 1e-5

    def test_shape_mismatch_raises(self):
        spec = ConvSpec(2, 3, kernel=3)
        with pytest.raises(ValueError):
            tensor.conv2d(np.zeros((1, 5, 6, 6)), np.zeros(spec.weight_shape),
                          None, spec)
        with pytest.raises(ValueError):
            tensor.conv2d(np.zeros((1, 2, 6, 6)), np.zeros((3, 2, 5, 5)),
                          None, spec)


class TestMatmul:
    def test_identity(self):
        a = np.arange(6, dtype=np.float64).reshape(2, 3)
        assert np.array_equal(tensor.matmul(np.eye(2), a), a)

    def test_scalar_product(self):
        assert tensor.matmul(np.array([[2.0]]), np.array([[3.0]]))[0, 0] == 6.0

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.normal(0, 1, (4, 5))
        b = rng.normal(0, 1, (5, 3))
        assert np.abs(tensor.matmul(a, b) - oracles.matmul_loops(a, b)).max() <= 1e-6

    def test_batched_is_independent_per_index(self):
        rng = np.random.default_rng(8)
        a = rng.normal(0, 1, (3, 2, 4))
        b = rng.normal(0, 1, (3, 4, 5))
        got = tensor.batched_matmul(a, b)
        for i in range(3):
            assert np.allclose(got[i], tensor.matmul(a[i], b[i]))

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ValueError):
            tensor.matmul(np.zeros((2, 3)), np.zeros((4, 2)))
        with pytest.raises(ValueError):
            tensor.batched_matmul(np.zeros((2, 2, 3)), np.zeros((3, 3, 2)))


class TestBilinear:
    def test_same_size_is_identity(self):
        rng = np.random.default_rng(9)
        x = rng.normal(0, 1, (1, 2, 5, 7)).astype(np.float32)
        assert np.array_equal(tensor.bilinear_resize(x, 5, 7), x)

    def test_constant_stays_constant(self):
        x = np.full((1, 1, 3, 3), 0.7, np.float32)
        assert np.allclose(tensor.bilinear_resize(x, 6, 6), 0.7, atol=1e-7)

    def test_2x2_to_4x4_matches_oracle(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
        got = tensor.bilinear_resize(x, 4, 4)
        assert np.allclose(got, oracles.bilinear_loops(x, 4, 4), atol=1e-12)

    def test_random_sizes_match_oracle(self):
        rng = np.random.default_rng(10)
        x = rng.normal(0, 1, (2, 3, 5, 4))
        for oh, ow in ((7, 9), (3, 2), (10, 4)):
            assert np.allclose(tensor.bilinear_resize(x, oh, ow),
                               oracles.bilinear_loops(x, oh, ow), atol=1e-12)

    def test_zero_target_raises(self):
        with pytest.raises(ValueError):
            tensor.bilinear_resize(np.zeros((1, 1, 4, 4)), 0, 4)


class TestPooling:
    def test_maxpool_2x2(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        assert tensor.maxpool2d(x, 2, 2)[0, 0, 0, 0] == 4.0

    def test_constant_input(self):
        x = np.full((1, 2, 4, 4), 1.5)
        assert np.allclose(tensor.maxpool2d(x, 2, 2), 1.5)
        assert np.allclose(tensor.avgpool2d(x, 2, 2), 1.5)

    def test_avgpool_matches_window_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.normal(0, 1, (1, 2, 8, 8))
        got = tensor.avgpool2d(x, 4, 4)
        assert np.allclose(got, oracles.avgpool_loops(x, 4, 4), atol=1e-12)

    def test_maxpool_matches_window_oracle(self):
        rng = np.random.default_rng(12)
        x = gapped_values(rng, (1, 1, 6, 6))
        assert np.allclose(tensor.maxpool2d(x, 3, 3),
                           oracles.maxpool_loops(x, 3, 3), atol=1e-12)

    def test_kernel_larger_than_input_raises(self):
        with pytest.raises(ValueError):
            tensor.maxpool2d(np.zeros((1, 1, 3, 3)), 4, 4)


class TestElementwise:
    def test_relu(self):
        assert np.array_equal(tensor.relu(np.array([-1.0, 0.0, 2.0])),
                              np.array([0.0, 0.0, 2.0]))

    def test_sigmoid_at_zero(self):
        assert tensor.sigmoid(np.array(0.0)) == 0.5

    def test_sigmoid_extremes_are_finite(self):
        out = tensor.sigmoid(np.array([-1e4, 1e4], np.float32))
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[1] == 1.0

    def test_concat_orders_channel_blocks(self):
        a = np.ones((1, 2, 3, 3))
        b = np.full((1, 3, 3, 3), 2.0)
        out = tensor.concat_channels([a, b])
        assert out.shape == (1, 5, 3, 3)
        assert np.all(out[:, :2] == 1.0) and np.all(out[:, 2:] == 2.0)

    def test_add_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            tensor.add(np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 3, 4)))

    def test_concat_spatial_mismatch_raises(self):
        with pytest.raises(ValueError):
            tensor.concat_channels([np.zeros((1, 1, 3, 3)),
                                    np.zeros((1, 1, 4, 3))])


class TestBatchnorm:
    def test_eval_identity_params(self):
        rng = np.random.default_rng(13)
        x = rng.normal(0, 1, (2, 3, 4, 4)).astype(np.float32)
        out, _, _ = tensor.batchnorm(
            x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3),
            eps=1e-12, training=False)
        assert np.allclose(out, x, atol=1e-6)

    def test_train_constant_input_gives_beta(self):
        x = np.full((2, 2, 3, 3), 5.0, np.float32)
        beta = np.array([0.3, -0.2], np.float32)
        out, _, _ = tensor.batchnorm(
            x, np.ones(2), beta, np.zeros(2), np.ones(2),
            eps=1e-5, training=True)
        assert np.allclose(out[:, 0], 0.3, atol=1e-6)
        assert np.allclose(out[:, 1], -0.2, atol=1e-6)

    def test_train_output_statistics(self):
        rng = np.random.default_rng(14)
        x = rng.normal(2.0, 3.0, (4, 2, 8, 8)).astype(np.float32)
        gamma = np.array([1.5, 0.5], np.float32)
        beta = np.array([0.1, -0.4], np.float32)
        out, _, _ = tensor.batchnorm(
            x, gamma, beta, np.zeros(2), np.ones(2), eps=1e-5, training=True)
        for c in range(2):
            assert abs(out[:, c].mean() - beta[c]) <= 1e-3
            assert abs(out[:, c].var() - gamma[c] ** 2) <= 1e-3

    def test_train_matches_statistics_oracle(self):
        rng = np.random.default_rng(15)
        x = rng.normal(0, 1, (3, 2, 4, 4))
        gamma = rng.normal(1, 0.2, 2)
        beta = rng.normal(0, 0.2, 2)
        out, _, _ = tensor.batchnorm(x, gamma, beta, np.zeros(2), np.ones(2),
                                     eps=1e-5, training=True)
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        want = oracles.batchnorm_loops(x, gamma, beta, mean, var, 1e-5)
        assert np.abs(out - want).max() <= 1e-6

    def test_running_stats_update_with_momentum(self):
        rng = np.random.default_rng(16)
        x = rng.normal(1.0, 2.0, (4, 1, 5, 5))
        rm, rv = np.zeros(1), np.ones(1)
        _, new_m, new_v = tensor.batchnorm(x, np.ones(1), np.zeros(1),
                                           rm, rv, 1e-5, training=True)
        count = x[:, 0].size
        want_m = 0.9 * 0.0 + 0.1 * x.mean()
        want_v = 0.9 * 1.0 + 0.1 * x.var() * count / (count - 1)
        assert abs(new_m[0] - want_m) <= 1e-6
        assert abs(new_v[0] - want_v) <= 1e-6

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError):
            tensor.batchnorm(np.zeros((1, 3, 2, 2)), np.ones(2), np.zeros(2),
                             np.zeros(2), np.ones(2), 1e-5, False)


class TestCounters:
    def test_conv_counts_one_gemm_and_one_unfold(self):
        rng = np.random.default_rng(17)
        spec = ConvSpec(2, 3, kernel=3, padding=1, groups=1)
        x = rng.normal(0, 1, (1, 2, 6, 6)).astype(np.float32)
        w = rng.normal(0, 0.5, spec.weight_shape).astype(np.float32)
        before = tensor.counters().snapshot()
        tensor.conv2d(x, w, None, spec)
        d = tensor.counters().delta(before)
        assert (d.gemm, d.unfold) == (1, 1)

    def test_grouped_conv_still_counts_one_gemm(self):
        rng = np.random.default_rng(18)
        spec = ConvSpec(4, 4, kernel=3, padding=1, groups=2)
        x = rng.normal(0, 1, (1, 4, 6, 6)).astype(np.float32)
        w = rng.normal(0, 0.5, spec.weight_shape).astype(np.float32)
        before = tensor.counters().snapshot()
        tensor.conv2d(x, w, None, spec)
        assert tensor.counters().delta(before).gemm == 1

    def test_reset(self):
        tensor.reset_counters()
        assert tensor.counters().gemm == 0 and tensor.counters().unfold == 0
