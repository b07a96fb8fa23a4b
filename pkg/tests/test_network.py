import numpy as np
import pytest

from van.layers import PooledFeature
from van.losses import OutputGrads, RegressionTarget
from van.moments import GaussianScalar, MomentVector, VARIANCE_FLOOR
from van.network import (
    NetworkConfig,
    backward,
    build,
    flatten_grads,
    flatten_params,
    forward,
    load_checkpoint,
    param_count,
    params_from_vector,
    save_checkpoint,
)
from van.oracle import _network_fd_error, mc_propagate


def make_feature(config, n=None, seed=0, var_scale=1.0):
    rng = np.random.default_rng(seed)
    shape = (config.pooled_dim,) if n is None else (n, config.pooled_dim)
    means = rng.normal(0.0, 1.0, shape)
    variances = rng.uniform(0.05, 0.5, shape) * var_scale
    return PooledFeature(MomentVector(means, variances), k=config.k, d=config.d)


SMALL = dict(d=6, k=2, hidden=12, classes=3)


class TestBuild:
    def test_deterministic(self):
        config = NetworkConfig(variant="van_o", **SMALL)
        a, b = build(config, 7), build(config, 7)
        for (_, x), (_, y) in zip(
            [("w", a.fc1.values), ("b", a.fc1.bias), ("w2", a.fc2.values),
             ("vh", a.var_head.values), ("vb", a.var_head.bias)],
            [("w", b.fc1.values), ("b", b.fc1.bias), ("w2", b.fc2.values),
             ("vh", b.var_head.values), ("vb", b.var_head.bias)],
        ):
            assert np.array_equal(x, y)

    def test_different_seeds_differ(self):
        config = NetworkConfig(variant="baseline", **SMALL)
        assert not np.array_equal(build(config, 0).fc1.values, build(config, 1).fc1.values)

    def test_van_o_initial_variance_near_sigma_t2(self):
        config = NetworkConfig(variant="van_o", **SMALL)
        params = build(config, 3)
        det, _ = forward(params, config, make_feature(config, n=16, seed=1), mode="train")
        ratio = det.boundary_var / config.sigma_t2
        assert np.all(ratio > 0.5) and np.all(ratio < 4.0)


class TestParamCount:
    def test_reference_architecture_counts(self):
        base = NetworkConfig(variant="baseline", d=2048, k=3, hidden=1000, classes=20)
        assert param_count(build(base, 0)) == 10_304_063
        vani = NetworkConfig(variant="van_i", d=2048, k=3, hidden=1000, classes=20)
        assert param_count(build(vani, 0)) == 20_544_063

    @pytest.mark.parametrize("cfg", [SMALL, dict(d=10, k=1, hidden=7, classes=2),
                                     dict(d=64, k=3, hidden=128, classes=5)])
    def test_van_p_equals_baseline_exactly(self, cfg):
        a = param_count(build(NetworkConfig(variant="baseline", **cfg), 0))
        b = param_count(build(NetworkConfig(variant="van_p", **cfg), 0))
        assert a == b

    def test_van_o_delta_is_exactly_the_head(self):
        cfg = dict(d=64, k=3, hidden=128, classes=5)
        base = param_count(build(NetworkConfig(variant="baseline", **cfg), 0))
        vano = param_count(build(NetworkConfig(variant="van_o", **cfg), 0))
        head = 128 * (5 + 1) * 2 + (5 + 1) * 2
        assert vano - base == head

    def test_van_i_roughly_doubles(self):
        cfg = dict(d=64, k=3, hidden=128, classes=5)
        base = param_count(build(NetworkConfig(variant="baseline", **cfg), 0))
        vani = param_count(build(NetworkConfig(variant="van_i", **cfg), 0))
        assert vani > 1.9 * base


class TestForward:
    def test_output_shapes(self):
        config = NetworkConfig(variant="baseline", **SMALL)
        det, _ = forward(build(config, 0), config, make_feature(config), mode="test")
        assert det.class_scores.shape == (4,)
        assert det.boundary_mean.shape == (4, 2)
        assert det.boundary_var.shape == (4, 2)

    def test_van_o_variances_positive(self):
        config = NetworkConfig(variant="van_o", **SMALL)
        det, _ = forward(build(config, 0), config, make_feature(config, n=8), mode="train")
        assert np.all(det.boundary_var > 0)

    def test_van_p_zero_variance_input_gives_floor_only(self):
        config = NetworkConfig(variant="van_p", **SMALL)
        params = build(config, 0)
        rng = np.random.default_rng(4)
        means = rng.normal(size=config.pooled_dim)
        feat = PooledFeature(MomentVector(means, np.zeros(config.pooled_dim)),
                             k=config.k, d=config.d)
        det, _ = forward(params, config, feat, mode="train")
        # the raw propagated variances are exactly 0; only the floor remains
        assert np.all(det.boundary_var == VARIANCE_FLOOR)
        # cross-check with sampling: a degenerate input propagates no spread
        from van.oracle import affine_map
        est = mc_propagate(affine_map(params.fc2), MomentVector(means[: config.hidden] * 0,
                                                                np.zeros(config.hidden)),
                           2000, seed=0)
        assert np.all(est.variance == 0.0)

    def test_dimension_mismatch_rejected(self):
        config = NetworkConfig(variant="baseline", **SMALL)
        bad = NetworkConfig(variant="baseline", d=5, k=2, hidden=12, classes=3)
        with pytest.raises(ValueError):
            forward(build(config, 0), config, make_feature(bad), mode="test")

    def test_unknown_mode_rejected(self):
        config = NetworkConfig(variant="baseline", **SMALL)
        with pytest.raises(ValueError):
            forward(build(config, 0), config, make_feature(config), mode="predict")


class TestMeanPathEquivalence:
    def test_van_p_test_mode_bitwise_equals_baseline(self):
        cfg_p = NetworkConfig(variant="van_p", **SMALL)
        cfg_b = NetworkConfig(variant="baseline", **SMALL)
        params = build(cfg_p, 11)  # same shapes for both variants
        feat = make_feature(cfg_p, n=64, seed=5)
        det_p, _ = forward(params, cfg_p, feat, mode="test")
        det_b, _ = forward(params, cfg_b, feat, mode="test")
        assert np.array_equal(det_p.class_scores, det_b.class_scores)
        assert np.array_equal(det_p.boundary_mean, det_b.boundary_mean)

    def test_van_p_train_and_test_means_identical(self):
        config = NetworkConfig(variant="van_p", **SMALL)
        params = build(config, 11)
        feat = make_feature(config, n=16, seed=6, var_scale=10.0)
        det_train, _ = forward(params, config, feat, mode="train")
        det_test, _ = forward(params, config, feat, mode="test")
        assert np.array_equal(det_train.class_scores, det_test.class_scores)
        assert np.array_equal(det_train.boundary_mean, det_test.boundary_mean)

    def test_van_i_with_zeroed_variance_block_reproduces_baseline(self):
        cfg_i = NetworkConfig(variant="van_i", **SMALL)
        cfg_b = NetworkConfig(variant="baseline", **SMALL)
        params_i = build(cfg_i, 2)
        params_i.fc1.values[cfg_b.pooled_dim :, :] = 0.0
        from van.moments import WeightMatrix
        from van.network import NetworkParams
        params_b = NetworkParams(
            WeightMatrix(params_i.fc1.values[: cfg_b.pooled_dim, :], params_i.fc1.bias),
            params_i.fc2,
        )
        rng = np.random.default_rng(9)
        means = rng.normal(size=(32, cfg_b.pooled_dim))
        feat = PooledFeature(MomentVector(means, np.zeros_like(means)), k=cfg_b.k, d=cfg_b.d)
        det_i, _ = forward(params_i, cfg_i, feat, mode="test")
        det_b, _ = forward(params_b, cfg_b, feat, mode="test")
        assert np.array_equal(det_i.class_scores, det_b.class_scores)
        assert np.array_equal(det_i.boundary_mean, det_b.boundary_mean)


class TestBackward:
    def _setup(self, variant, var_scale=1.0):
        config = NetworkConfig(variant=variant, **SMALL)
        params = build(config, 1)
        feat = make_feature(config, n=4, seed=2, var_scale=var_scale)
        det, tape = forward(params, config, feat, mode="train")
        return config, params, feat, det, tape

    def test_test_mode_tape_rejected(self):
        config = NetworkConfig(variant="baseline", **SMALL)
        params = build(config, 1)
        _, tape = forward(params, config, make_feature(config, n=4), mode="test")
        zeros = OutputGrads(np.zeros((4, 4)), np.zeros((4, 4, 2)), np.zeros((4, 4, 2)))
        with pytest.raises(RuntimeError):
            backward(params, config, tape, zeros)

    @pytest.mark.parametrize("variant", ["baseline", "van_i", "van_o", "van_p"])
    def test_zero_upstream_gives_zero_grads(self, variant):
        config, params, feat, det, tape = self._setup(variant)
        zeros = OutputGrads(np.zeros((4, 4)), np.zeros((4, 4, 2)), np.zeros((4, 4, 2)))
        grads = flatten_grads(backward(params, config, tape, zeros))
        assert np.all(grads == 0)

    def test_van_p_variance_stream_receives_gradient(self):
        config, params, feat, det, tape = self._setup("van_p", var_scale=50.0)
        rng = np.random.default_rng(3)
        only_var = OutputGrads(np.zeros((4, 4)), np.zeros((4, 4, 2)),
                               rng.normal(size=(4, 4, 2)))
        grads = flatten_grads(backward(params, config, tape, only_var))
        assert np.linalg.norm(grads) > 0

    @pytest.mark.parametrize("variant", ["baseline", "van_i", "van_o", "van_p"])
    def test_full_loss_gradient_matches_finite_differences(self, variant):
        assert _network_fd_error(variant, seed=31, coords=40) <= 1e-4


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        config = NetworkConfig(variant="van_o", **SMALL)
        params = build(config, 21)
        path = tmp_path / "model.vckpt"
        save_checkpoint(path, params, config, seed=21)
        loaded, loaded_config, seed = load_checkpoint(path)
        assert loaded_config == config
        assert seed == 21
        assert np.array_equal(loaded.fc1.values, params.fc1.values)
        assert np.array_equal(loaded.fc2.bias, params.fc2.bias)
        assert np.array_equal(loaded.var_head.values, params.var_head.values)

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "junk.vckpt"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_param_vector_roundtrip(self):
        config = NetworkConfig(variant="van_o", **SMALL)
        params = build(config, 5)
        vec = flatten_params(params)
        rebuilt = params_from_vector(params, vec)
        assert np.array_equal(flatten_params(rebuilt), vec)
