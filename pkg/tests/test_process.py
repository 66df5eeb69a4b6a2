"""Growth-law oracles: closed-form values, closure, elasticities, units."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agblab.errors import ArgumentError, DomainError
from agblab.process import (LatentState, ProcessParams, Trajectory,
                            elasticity_lai, elasticity_log_par, g_m2_to_t_ha,
                            growth_increment, intercepted_radiation,
                            read_trajectory_csv, residual, simulate, step,
                            t_ha_to_g_m2, trajectory_residuals,
                            write_trajectory_csv)

K = 0.6
STATE = LatentState(lai=2.0, par=10.0, rue=3.0, fw=1.0)
# independent closed-form evaluation used as the expected value throughout
PHI = 3.0 * 10.0 * (1.0 - math.exp(-K * 2.0)) * 1.0


latent_strategy = st.builds(
    LatentState,
    lai=st.floats(0.0, 12.0),
    par=st.floats(0.0, 20.0),
    rue=st.floats(0.5, 4.0),
    fw=st.floats(0.0, 1.0),
)


class TestInterceptedRadiation:
    def test_zero_lai_intercepts_nothing(self):
        assert intercepted_radiation(10.0, 0.0, K) == 0.0

    def test_closed_form(self):
        expected = 10.0 * (1.0 - math.exp(-1.2))
        assert intercepted_radiation(10.0, 2.0, K) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(6.98806, abs=1e-5)

    def test_saturates_to_par(self):
        assert intercepted_radiation(10.0, 30.0, K) == pytest.approx(10.0, abs=1e-6)

    def test_negative_input_names_field(self):
        with pytest.raises(DomainError, match="par"):
            intercepted_radiation(-1.0, 2.0, K)
        with pytest.raises(DomainError, match="lai"):
            intercepted_radiation(1.0, -2.0, K)
        with pytest.raises(DomainError, match="k"):
            intercepted_radiation(1.0, 2.0, 0.0)

    @given(lai=st.floats(0.0, 50.0), par=st.floats(0.0, 30.0))
    def test_bounded_by_par(self, lai, par):
        value = intercepted_radiation(par, lai, K)
        assert 0.0 <= value <= par

    @given(lai=st.floats(0.0, 20.0), bump=st.floats(0.001, 5.0))
    def test_monotone_in_lai(self, lai, bump):
        assert intercepted_radiation(10.0, lai + bump, K) >= \
            intercepted_radiation(10.0, lai, K)


class TestGrowthIncrement:
    def test_water_stress_annihilates(self):
        state = LatentState(lai=2.0, par=10.0, rue=3.0, fw=0.0)
        assert growth_increment(state, K) == 0.0

    def test_half_stress(self):
        state = LatentState(lai=2.0, par=10.0, rue=3.0, fw=0.5)
        assert growth_increment(state, K) == pytest.approx(PHI / 2, rel=1e-12)

    def test_unstressed(self):
        assert growth_increment(STATE, K) == pytest.approx(PHI, rel=1e-12)
        assert PHI == pytest.approx(20.96417, abs=1e-5)

    def test_invalid_state_raises(self):
        with pytest.raises(DomainError, match="fw"):
            growth_increment(LatentState(lai=2, par=10, rue=3, fw=1.5), K)

    @given(latent_strategy)
    def test_annihilators(self, state):
        for zeroed in ("lai", "par", "fw"):
            kwargs = {"lai": state.lai, "par": state.par,
                      "rue": state.rue, "fw": state.fw, zeroed: 0.0}
            assert growth_increment(LatentState(**kwargs), K) == 0.0

    @given(latent_strategy)
    def test_nonnegative(self, state):
        assert growth_increment(state, K) >= 0.0


class TestStep:
    def test_zero_increment_keeps_agb(self):
        state = LatentState(lai=2.0, par=10.0, rue=3.0, fw=0.0)
        assert step(100.0, state, K) == 100.0

    def test_adds_increment(self):
        assert step(100.0, STATE, K) == pytest.approx(100.0 + PHI, rel=1e-12)

    def test_zero_initial_state(self):
        assert step(0.0, STATE, K) == pytest.approx(PHI, rel=1e-12)

    def test_negative_agb_rejected(self):
        with pytest.raises(DomainError, match="agb"):
            step(-1.0, STATE, K)


class TestSimulate:
    def test_all_stressed_is_flat(self):
        state = LatentState(lai=2.0, par=10.0, rue=3.0, fw=0.0)
        traj = simulate(0.0, [state] * 3, ProcessParams())
        assert np.array_equal(traj.agb, np.zeros(4))

    def test_repeated_step(self):
        traj = simulate(100.0, [STATE, STATE], ProcessParams())
        expected = np.array([100.0, 100.0 + PHI, 100.0 + 2 * PHI])
        np.testing.assert_allclose(traj.agb, expected, rtol=1e-12)

    def test_empty_series_rejected(self):
        with pytest.raises(ArgumentError):
            simulate(0.0, [], ProcessParams())

    def test_out_of_bounds_rue_rejected(self):
        with pytest.raises(DomainError, match="rue"):
            simulate(0.0, [LatentState(lai=1, par=5, rue=9.0, fw=1.0)],
                     ProcessParams())

    def test_zero_residual_closure(self):
        rng = np.random.default_rng(7)
        params = ProcessParams()
        states = [
            LatentState(lai=float(rng.uniform(0, 8)), par=float(rng.uniform(0, 15)),
                        rue=float(rng.uniform(0.5, 4)), fw=float(rng.uniform(0, 1)))
            for _ in range(50)
        ]
        traj = simulate(float(rng.uniform(0, 10)), states, params)
        assert np.max(np.abs(trajectory_residuals(traj, params))) < 1e-9

    def test_agb_nondecreasing(self):
        rng = np.random.default_rng(3)
        states = [
            LatentState(lai=float(rng.uniform(0, 8)), par=float(rng.uniform(0, 15)),
                        rue=float(rng.uniform(0.5, 4)), fw=float(rng.uniform(0, 1)))
            for _ in range(30)
        ]
        traj = simulate(1.0, states, ProcessParams())
        assert np.all(np.diff(traj.agb) >= 0)


class TestResidual:
    def test_exact_consistency_is_zero(self):
        assert residual(growth_increment(STATE, K), STATE, K) == 0.0

    def test_positive_when_growth_exceeds_law(self):
        value = residual(25.0, STATE, K)
        assert value == pytest.approx(25.0 - PHI, rel=1e-12)
        assert value > 0

    def test_zero_delta_zero_growth(self):
        state = LatentState(lai=2.0, par=10.0, rue=3.0, fw=0.0)
        assert residual(0.0, state, K) == 0.0


class TestElasticities:
    def test_lai_closed_form(self):
        expected = 3.0 * 10.0 * 1.0 * K * math.exp(-K * 2.0)
        assert elasticity_lai(STATE, K) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(5.42150, abs=1e-5)

    def test_lai_zero_under_full_stress(self):
        state = LatentState(lai=2.0, par=10.0, rue=3.0, fw=0.0)
        assert elasticity_lai(state, K) == 0.0

    def test_lai_matches_central_difference(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            state = LatentState(lai=float(rng.uniform(0.1, 8)),
                                par=float(rng.uniform(0.1, 15)),
                                rue=float(rng.uniform(0.5, 4)),
                                fw=float(rng.uniform(0.01, 1)))
            eps = 1e-6
            up = growth_increment(LatentState(lai=state.lai + eps, par=state.par,
                                              rue=state.rue, fw=state.fw), K)
            down = growth_increment(LatentState(lai=state.lai - eps, par=state.par,
                                                rue=state.rue, fw=state.fw), K)
            fd = (up - down) / (2 * eps)
            assert elasticity_lai(state, K) == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_log_par_equals_increment(self):
        assert elasticity_log_par(STATE, K) == pytest.approx(PHI, rel=1e-12)

    def test_log_par_zero_under_stress(self):
        state = LatentState(lai=2.0, par=10.0, rue=3.0, fw=0.0)
        assert elasticity_log_par(state, K) == 0.0

    def test_log_par_rejects_zero_par(self):
        with pytest.raises(DomainError, match="par"):
            elasticity_log_par(LatentState(lai=2, par=0.0, rue=3, fw=1), K)

    def test_log_par_matches_chain_rule(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            state = LatentState(lai=float(rng.uniform(0.1, 8)),
                                par=float(rng.uniform(0.5, 15)),
                                rue=float(rng.uniform(0.5, 4)),
                                fw=float(rng.uniform(0.01, 1)))
            eps = 1e-6 * state.par
            up = growth_increment(LatentState(lai=state.lai, par=state.par + eps,
                                              rue=state.rue, fw=state.fw), K)
            down = growth_increment(LatentState(lai=state.lai, par=state.par - eps,
                                                rue=state.rue, fw=state.fw), K)
            fd = state.par * (up - down) / (2 * eps)
            assert elasticity_log_par(state, K) == pytest.approx(fd, rel=1e-6)


class TestUnits:
    def test_round_trip_12_digits(self):
        rng = np.random.default_rng(5)
        values = rng.uniform(0.01, 5000.0, size=1000)
        back = t_ha_to_g_m2(g_m2_to_t_ha(values))
        assert np.max(np.abs(back - values) / values) < 1e-12

    def test_factor(self):
        assert g_m2_to_t_ha(100.0) == pytest.approx(1.0, rel=1e-15)


class TestProcessParams:
    def test_invalid_k(self):
        with pytest.raises(DomainError, match="k"):
            ProcessParams(k=0.0)

    def test_invalid_bounds(self):
        with pytest.raises(DomainError, match="rue_bounds"):
            ProcessParams(rue_bounds=(2.0, 1.0))


class TestTrajectoryInvariants:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ArgumentError):
            Trajectory(location_id="x", agb=np.array([0.0, 1.0]),
                       latent=(STATE, STATE))

    def test_csv_round_trip(self, tmp_path):
        from agblab.data import generate_forcing, forcing_to_latent, ScenarioParams

        params = ProcessParams()
        forcing = generate_forcing(3, 12, "rainfed")
        states = forcing_to_latent(forcing, ScenarioParams())
        traj = simulate(1.0, states, params, forcing=forcing, location_id="L1")
        path = tmp_path / "traj.csv"
        write_trajectory_csv(traj, path, params=params)
        back = read_trajectory_csv(path)
        np.testing.assert_array_equal(back.agb, traj.agb)
        assert back.location_id == "L1"
        assert len(back.latent) == len(traj.latent)
        for a, b in zip(back.latent, traj.latent):
            assert a == b
        for a, b in zip(back.forcing, traj.forcing):
            assert a == b

    def test_csv_residual_column_near_zero(self, tmp_path):
        import csv as csvmod

        params = ProcessParams()
        traj = simulate(1.0, [STATE] * 5, params)
        path = tmp_path / "t.csv"
        write_trajectory_csv(traj, path, params=params)
        with open(path) as fh:
            rows = list(csvmod.DictReader(fh))
        residuals = [float(r["residual_g_m2_day"]) for r in rows[:-1]]
        assert max(abs(r) for r in residuals) < 1e-9
        assert rows[-1]["residual_g_m2_day"] == ""
        assert rows[-1]["lai"] == ""
