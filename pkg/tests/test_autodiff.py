"""Engine checks: primitive VJPs against finite differences, accumulation
semantics, determinism, and checkpoint round-trips."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from agblab import autodiff as ad
from agblab.errors import ArgumentError, NumericError, ShapeError


def fd_check(build, store, eps=1e-5, tol=1e-5):
    assert ad.grad_check(build, store, eps=eps) < tol


def make_store(**arrays):
    store = ad.ParameterStore()
    for name, value in arrays.items():
        store.add(name, value)
    return store


class TestPrimitiveValues:
    def test_exp_zero(self):
        t = ad.exp(ad.constant(0.0))
        assert t.value == 1.0
        ad.backward(t)
        assert t.parents[0].adjoint == 1.0

    def test_mul_product_rule(self):
        a, b = ad.constant(3.0), ad.constant(4.0)
        out = ad.mul(a, b)
        assert out.value == 12.0
        ad.backward(out)
        assert a.adjoint == 4.0
        assert b.adjoint == 3.0

    def test_matmul_ones(self):
        out = ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((3, 1))))
        np.testing.assert_array_equal(out.value, [[3.0], [3.0]])

    def test_matmul_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 1\)"):
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 1))))

    def test_add_shape_error(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            ad.add(ad.constant(np.ones(2)), ad.constant(np.ones(3)))

    def test_operator_sugar_matches_primitives(self):
        x = ad.constant(np.array([1.0, 2.0]))
        np.testing.assert_array_equal((1.0 - x).value, [0.0, -1.0])
        np.testing.assert_array_equal((x / 2.0).value, [0.5, 1.0])
        np.testing.assert_array_equal((2.0 / x).value, [2.0, 1.0])
        np.testing.assert_array_equal((-x).value, [-1.0, -2.0])


class TestPrimitiveGradients:
    """Finite-difference check of every primitive at random inputs."""

    RNG = np.random.default_rng(123)

    def test_binary_ops(self):
        a0 = self.RNG.normal(size=(3, 4))
        b0 = self.RNG.normal(size=(3, 4)) + 3.0
        for op in (ad.add, ad.sub, ad.mul, ad.div):
            store = make_store(a=a0.copy(), b=b0.copy())
            fd_check(lambda s, op=op: ad.mean(ad.square(op(s["a"], s["b"]))), store)

    def test_broadcast_binary(self):
        store = make_store(a=self.RNG.normal(size=(3, 4)),
                           b=self.RNG.normal(size=(4,)))
        fd_check(lambda s: ad.mean(ad.square(ad.add(s["a"], s["b"]))), store)

    def test_unary_ops(self):
        for op in (ad.neg, ad.exp, ad.square, ad.sigmoid, ad.softplus, ad.relu,
                   ad.tanh):
            store = make_store(x=self.RNG.normal(size=(2, 5)) + 0.1)
            fd_check(lambda s, op=op: ad.mean(ad.square(op(s["x"]))), store)

    def test_matmul(self):
        store = make_store(a=self.RNG.normal(size=(3, 4)),
                           b=self.RNG.normal(size=(4, 2)))
        fd_check(lambda s: ad.mean(ad.square(ad.matmul(s["a"], s["b"]))), store)

    def test_reductions(self):
        store = make_store(x=self.RNG.normal(size=(3, 4)))
        fd_check(lambda s: ad.square(ad.reduce_sum(s["x"])), store)
        fd_check(lambda s: ad.square(ad.mean(s["x"])), store)
        fd_check(lambda s: ad.mean(ad.square(ad.reduce_sum(s["x"], axis=1))), store)

    def test_shape_ops(self):
        store = make_store(x=self.RNG.normal(size=(2, 6)))
        fd_check(lambda s: ad.mean(ad.square(ad.reshape(s["x"], (3, 4)))), store)
        fd_check(lambda s: ad.mean(ad.square(
            ad.broadcast_to(ad.reshape(s["x"], (2, 6, 1)), (2, 6, 3)))), store)
        fd_check(lambda s: ad.mean(ad.square(
            ad.slice_(s["x"], (slice(None), slice(1, 4))))), store)
        fd_check(lambda s: ad.mean(ad.square(
            ad.concat([s["x"], ad.square(s["x"])], axis=1))), store)

    def test_dropout_fixed_mask(self):
        # mask must be frozen per evaluation for the check to be meaningful
        store = make_store(x=self.RNG.normal(size=(4, 4)))

        def build(s):
            rng = np.random.default_rng(99)
            return ad.mean(ad.square(ad.dropout(s["x"], 0.4, rng)))

        fd_check(build, store)


class TestBackwardSemantics:
    def test_sum_of_parameters_has_unit_adjoints(self):
        store = make_store(a=np.ones(3), b=np.ones((2, 2)))
        root = ad.add(ad.reduce_sum(store["a"]), ad.reduce_sum(store["b"]))
        grads = ad.backward(root, store)
        np.testing.assert_array_equal(grads["a"], np.ones(3))
        np.testing.assert_array_equal(grads["b"], np.ones((2, 2)))

    def test_square_adjoint(self):
        store = make_store(p=np.array(3.0))
        grads = ad.backward(ad.square(store["p"]), store)
        assert grads["p"] == 6.0

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ArgumentError):
            ad.backward(ad.constant(np.ones(3)))

    def test_repeated_backward_accumulates(self):
        store = make_store(p=np.array(2.0))
        root = ad.square(store["p"])
        ad.backward(root)
        ad.backward(root)
        assert store["p"].adjoint == 8.0

    def test_shared_subexpression(self):
        store = make_store(p=np.array(3.0))
        p = store["p"]
        root = ad.add(ad.mul(p, p), ad.mul(p, p))  # 2p^2 -> d = 4p
        grads = ad.backward(root, store)
        assert grads["p"] == 12.0

    def test_growth_law_adjoints_match_analytic_elasticities(self):
        from agblab.process import (LatentState, elasticity_lai,
                                    elasticity_log_par, growth_law)

        rng = np.random.default_rng(21)
        k = 0.6
        for _ in range(100):
            state = LatentState(lai=float(rng.uniform(0.1, 8)),
                                par=float(rng.uniform(0.5, 15)),
                                rue=float(rng.uniform(0.5, 4)),
                                fw=float(rng.uniform(0.01, 1)))
            store = make_store(lai=np.array(state.lai), par=np.array(state.par),
                               rue=np.array(state.rue), fw=np.array(state.fw))
            phi = growth_law(store["rue"], store["par"], store["lai"],
                             store["fw"], k, exp=ad.exp)
            grads = ad.backward(phi, store)
            assert grads["lai"] == pytest.approx(elasticity_lai(state, k), rel=1e-6)
            assert state.par * grads["par"] == pytest.approx(
                elasticity_log_par(state, k), rel=1e-6)

    @given(a=st.floats(-3, 3), b=st.floats(-3, 3))
    def test_linearity_of_backward(self, a, b):
        x0 = np.array([0.7, -1.2, 2.0])

        def adjoint_of(scale_f, scale_g):
            store = make_store(x=x0.copy())
            f = ad.mean(ad.square(store["x"]))
            g = ad.reduce_sum(ad.exp(store["x"] * 0.3))
            root = scale_f * f + scale_g * g
            return ad.backward(root, store)["x"]

        combined = adjoint_of(a, b)
        separate = a * adjoint_of(1.0, 0.0) + b * adjoint_of(0.0, 1.0)
        np.testing.assert_allclose(combined, separate, rtol=1e-12, atol=1e-12)


class TestGradCheck:
    def test_quadratic(self):
        store = make_store(w=np.array([1.0, -2.0, 0.5]))
        err = ad.grad_check(lambda s: ad.reduce_sum(ad.square(s["w"])), store)
        assert err < 1e-6

    def test_constant_function_zero_error(self):
        store = make_store(w=np.array([1.0, 2.0]))
        err = ad.grad_check(lambda s: ad.constant(5.0) + 0.0 * ad.reduce_sum(s["w"]),
                            store)
        assert err == 0.0

    def test_eps_bounds(self):
        store = make_store(w=np.ones(2))
        with pytest.raises(ArgumentError):
            ad.grad_check(lambda s: ad.reduce_sum(s["w"]), store, eps=1e-2)

    @pytest.mark.filterwarnings("ignore:divide by zero")
    def test_non_finite_loss(self):
        store = make_store(w=np.zeros(1))
        with pytest.raises(NumericError):
            ad.grad_check(lambda s: ad.div(ad.constant(1.0),
                                           ad.reduce_sum(s["w"])), store)


class TestDeterminism:
    def test_identical_seeds_bit_identical(self):
        def run():
            rng = np.random.default_rng(77)
            store = make_store(w=np.linspace(-1, 1, 12).reshape(3, 4))
            x = ad.constant(rng.normal(size=(5, 3)))
            h = ad.dropout(ad.relu(ad.matmul(x, store["w"])), 0.3,
                           np.random.default_rng(5))
            loss = ad.mean(ad.square(h))
            grads = ad.backward(loss, store)
            return loss.value.copy(), grads["w"].copy()

        v1, g1 = run()
        v2, g2 = run()
        assert np.array_equal(v1, v2)
        assert np.array_equal(g1, g2)


class TestParameterStore:
    def test_duplicate_name_rejected(self):
        store = make_store(w=np.ones(2))
        with pytest.raises(ArgumentError):
            store.add("w", np.zeros(2))

    def test_slot_shapes_match(self):
        store = make_store(w=np.ones((2, 3)))
        assert store.slot("w", "velocity").shape == (2, 3)

    def test_snapshot_restore(self):
        store = make_store(w=np.ones(3))
        snap = store.snapshot()
        store["w"].value += 5.0
        store.restore(snap)
        np.testing.assert_array_equal(store["w"].value, np.ones(3))

    def test_checkpoint_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        store = make_store(w=rng.normal(size=(4, 3)), b=rng.normal(size=3) * 1e-17)
        store.step = 57
        path = tmp_path / "params.csv"
        store.save(path)
        loaded = ad.ParameterStore.load(path)
        assert loaded.step == 57
        assert loaded.names() == store.names()
        for name in store.names():
            assert np.array_equal(loaded[name].value, store[name].value)

    def test_checkpoint_bad_header(self, tmp_path):
        path = tmp_path / "junk.csv"
        path.write_text("nope\n")
        with pytest.raises(ArgumentError):
            ad.ParameterStore.load(path)
