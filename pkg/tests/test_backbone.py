"""Backbone contracts: init determinism, head bounds, shapes, gradients."""

import math

import numpy as np
import pytest

from agblab import autodiff as ad
from agblab.backbone import (BACKBONE_KINDS, NetworkConfig, bound_latents,
                             forward, init_network, residual_graph)
from agblab.errors import ArgumentError, ConfigError, ShapeError

SMALL_FEATURES = tuple(f"f{i}" for i in range(8))


def small_config(kind, **kw):
    hidden = (8,) if kind == "recurrent" else (8, 8)
    defaults = dict(backbone=kind, hidden=hidden, features=SMALL_FEATURES,
                    dropout=0.0)
    defaults.update(kw)
    return NetworkConfig(**defaults)


class TestInit:
    def test_deterministic(self):
        cfg = small_config("conv1d")
        s1 = init_network(cfg, 42)
        s2 = init_network(cfg, 42)
        assert s1.names() == s2.names()
        for name in s1.names():
            assert np.array_equal(s1[name].value, s2[name].value)

    def test_seed_changes_weights(self):
        cfg = small_config("mlp")
        s1, s2 = init_network(cfg, 1), init_network(cfg, 2)
        assert not np.array_equal(s1["dense0.w"].value, s2["dense0.w"].value)

    def test_mlp_parameter_count(self):
        cfg = NetworkConfig(backbone="mlp", hidden=(16,), features=SMALL_FEATURES,
                            dropout=0.0)
        assert init_network(cfg, 0).n_parameters() == 8 * 16 + 16 + 16 * 5 + 5

    def test_biases_zero(self):
        cfg = small_config("conv1d")
        store = init_network(cfg, 3)
        for name in store.names():
            if name.endswith(".b"):
                assert np.all(store[name].value == 0.0)

    def test_invalid_config_paths(self):
        with pytest.raises(ConfigError, match="network.backbone"):
            NetworkConfig(backbone="transformer")
        with pytest.raises(ConfigError, match="network.dropout"):
            NetworkConfig(dropout=1.0)
        with pytest.raises(ConfigError, match="network.hidden"):
            NetworkConfig(hidden=())
        with pytest.raises(ConfigError, match="network.kernel_size"):
            NetworkConfig(kernel_size=4)


class TestForward:
    def test_zero_weights_give_head_midpoints(self):
        cfg = small_config("mlp", rue_bounds=(1.0, 3.0))
        store = init_network(cfg, 0)
        for name in store.names():
            store[name].value[:] = 0.0
        x = np.random.default_rng(0).normal(size=(2, 6, 8))
        bundle = forward(store, x, cfg)
        assert np.all(bundle.fw.value == 0.5)
        assert np.allclose(bundle.rue.value, 2.0)
        assert np.allclose(bundle.lai.value, math.log(2.0))

    def test_infer_mode_is_pure(self):
        cfg = small_config("conv1d", dropout=0.3)
        store = init_network(cfg, 5)
        x = np.random.default_rng(1).normal(size=(3, 10, 8))
        b1 = forward(store, x, cfg, mode="infer")
        b2 = forward(store, x, cfg, mode="infer")
        assert np.array_equal(b1.agb.value, b2.agb.value)

    def test_train_mode_dropout_reproducible(self):
        cfg = small_config("mlp", dropout=0.3)
        store = init_network(cfg, 5)
        x = np.random.default_rng(1).normal(size=(3, 10, 8))
        b1 = forward(store, x, cfg, mode="train", rng=np.random.default_rng(9))
        b2 = forward(store, x, cfg, mode="train", rng=np.random.default_rng(9))
        b3 = forward(store, x, cfg, mode="train", rng=np.random.default_rng(10))
        assert np.array_equal(b1.agb.value, b2.agb.value)
        assert not np.array_equal(b1.agb.value, b3.agb.value)

    def test_train_mode_without_rng_rejected(self):
        cfg = small_config("mlp", dropout=0.3)
        store = init_network(cfg, 5)
        with pytest.raises(ArgumentError):
            forward(store, np.zeros((1, 4, 8)), cfg, mode="train")

    def test_dropout_zero_inserts_no_mask(self):
        cfg = small_config("mlp", dropout=0.0)
        store = init_network(cfg, 5)
        x = np.random.default_rng(1).normal(size=(2, 4, 8))
        b_train = forward(store, x, cfg, mode="train", rng=np.random.default_rng(0))
        b_infer = forward(store, x, cfg, mode="infer")
        assert np.array_equal(b_train.agb.value, b_infer.agb.value)

    def test_layout_mismatch(self):
        cfg = small_config("mlp")
        store = init_network(cfg, 5)
        with pytest.raises(ShapeError, match="feature window"):
            forward(store, np.zeros((2, 4, 11)), cfg)

    def test_delta_is_consecutive_difference(self):
        cfg = small_config("conv1d")
        store = init_network(cfg, 7)
        x = np.random.default_rng(2).normal(size=(4, 9, 8))
        bundle = forward(store, x, cfg)
        np.testing.assert_allclose(bundle.delta.value,
                                   np.diff(bundle.agb.value, axis=1),
                                   rtol=1e-12, atol=1e-12)

    def test_2d_input_promoted(self):
        cfg = small_config("mlp")
        store = init_network(cfg, 7)
        bundle = forward(store, np.zeros((6, 8)), cfg)
        assert bundle.agb.shape == (1, 6)

    def test_backbones_share_bundle_shapes(self):
        shapes = set()
        for kind in BACKBONE_KINDS:
            cfg = small_config(kind)
            store = init_network(cfg, 11)
            bundle = forward(store, np.zeros((3, 12, 8)), cfg)
            shapes.add((bundle.agb.shape, bundle.lai.shape, bundle.fw.shape,
                        bundle.delta.shape))
        assert len(shapes) == 1


class TestBoundLatents:
    CFG = NetworkConfig(rue_bounds=(0.5, 4.0), lai_cap=12.0, dropout=0.0)

    def test_fw_saturates_to_one(self):
        out = bound_latents(np.array([0.0, 0.0, 0.0, 60.0]), self.CFG)
        assert out["fw"] == pytest.approx(1.0)

    def test_rue_midpoint_at_zero(self):
        out = bound_latents(np.zeros(4), self.CFG)
        assert out["rue"] == pytest.approx(2.25)

    def test_lai_softplus_at_zero(self):
        out = bound_latents(np.zeros(4), self.CFG)
        assert out["lai"] == pytest.approx(math.log(2.0), rel=1e-12)

    def test_bounds_hold_for_random_raw(self):
        rng = np.random.default_rng(17)
        raw = rng.normal(scale=50.0, size=(10000, 4))
        out = bound_latents(raw, self.CFG)
        assert np.all(out["lai"] >= 0) and np.all(out["lai"] <= 12.0)
        assert np.all(out["par"] >= 0)
        assert np.all(out["rue"] >= 0.5) and np.all(out["rue"] <= 4.0)
        assert np.all(out["fw"] >= 0) and np.all(out["fw"] <= 1)

    def test_monotone_per_channel(self):
        raw = np.linspace(-6, 6, 101)
        grid = np.stack([raw] * 4, axis=-1)
        out = bound_latents(grid, self.CFG)
        for name in ("lai", "par", "rue", "fw"):
            assert np.all(np.diff(out[name]) > 0)

    def test_wrong_last_axis(self):
        with pytest.raises(ShapeError):
            bound_latents(np.zeros((3, 5)), self.CFG)


class TestGradients:
    @pytest.mark.parametrize("kind", BACKBONE_KINDS)
    def test_grad_check_through_forward_and_heads(self, kind):
        cfg = small_config(kind, hidden=(6,) if kind == "recurrent" else (6, 6))
        store = init_network(cfg, 23)
        x = np.random.default_rng(3).normal(size=(2, 7, 8))

        def build(s):
            bundle = forward(s, x, cfg)
            return (ad.mean(ad.square(bundle.agb)) + ad.mean(bundle.fw)
                    + ad.mean(bundle.lai) + ad.mean(bundle.rue)
                    + ad.mean(bundle.par))

        assert ad.grad_check(build, store) < 1e-4

    def test_residual_graph_matches_numpy_formula(self):
        from agblab.process import growth_law

        cfg = small_config("conv1d")
        store = init_network(cfg, 31)
        x = np.random.default_rng(4).normal(size=(3, 8, 8))
        bundle = forward(store, x, cfg)
        res = residual_graph(bundle, 0.6)
        phi = growth_law(bundle.rue.value[:, :-1], bundle.par.value[:, :-1],
                         bundle.lai.value[:, :-1], bundle.fw.value[:, :-1], 0.6)
        np.testing.assert_allclose(res.value,
                                   np.diff(bundle.agb.value, axis=1) - phi,
                                   rtol=1e-12, atol=1e-12)

    def test_residual_graph_needs_two_steps(self):
        cfg = small_config("mlp")
        store = init_network(cfg, 31)
        bundle = forward(store, np.zeros((2, 1, 8)), cfg)
        with pytest.raises(ArgumentError):
            residual_graph(bundle, 0.6)
