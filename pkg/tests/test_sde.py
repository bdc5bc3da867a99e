import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twoscale.errors import BlowUpError, ParameterError, StepSizeError
from twoscale.model import ControlSet, make_benchmark
from twoscale.numerics import mean_and_se
from twoscale.sde import (
    ControlPolicy,
    estimate_payoff,
    integrate_fast,
    integrate_two_scale,
    mc_value_lower_bound,
    simulate_ensemble,
    simulate_fast_ensemble,
    simulate_path_ensemble,
    steps_for,
)


def _custom(**kw):
    return make_benchmark("custom_1d", kw)


class TestIntegrateTwoScale:
    def test_zero_dynamics_constant_path(self):
        model = _custom(by=0.0, rho0=0.0, epsilon=1.0, horizon=0.5)
        path = integrate_two_scale(model, None, [1.5], [-0.5], 0.1, seed=3)
        assert np.all(path.x == 1.5) and np.all(path.y == -0.5)

    def test_single_deterministic_step(self):
        model = _custom(f0=1.0, epsilon=1.0, horizon=0.01)
        path = integrate_two_scale(model, None, [0.0], [0.0], 0.01, seed=0)
        assert path.x[-1, 0] == 0.01

    def test_path_invariants(self):
        model = make_benchmark("ou", {"epsilon": 0.1, "horizon": 0.2})
        path = integrate_two_scale(model, None, [0.0], [1.0], 0.01, seed=5, path_index=7)
        assert len(path.t) == len(path.x) == len(path.y) == len(path.u) == 21
        np.testing.assert_allclose(np.diff(path.t), 0.01, rtol=1e-12)
        assert path.seed == 5 and path.path_index == 7

    def test_replay_bit_exact(self):
        model = make_benchmark("ou", {"epsilon": 0.1, "horizon": 0.2, "s0": 0.5, "fy": 1.0})
        a = integrate_two_scale(model, None, [0.3], [1.0], 0.01, seed=9, path_index=4)
        b = integrate_two_scale(model, None, [0.3], [1.0], 0.01, seed=9, path_index=4)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)
        c = integrate_two_scale(model, None, [0.3], [1.0], 0.01, seed=9, path_index=5)
        assert not np.array_equal(a.y, c.y)

    def test_shared_noise_increment(self):
        # f = b = 0 and sigma = rho = 1 on the same column: both blocks see the same dW
        model = _custom(by=0.0, rho0=1.0, s0=1.0, epsilon=1.0, horizon=1.0)
        path = integrate_two_scale(model, None, [0.0], [0.0], 0.1, seed=1)
        np.testing.assert_allclose(path.x, path.y, atol=1e-14)
        indep = _custom(by=0.0, rho0=1.0, s0=1.0, r=2, epsilon=1.0, horizon=1.0)
        path = integrate_two_scale(indep, None, [0.0], [0.0], 0.1, seed=1)
        assert not np.allclose(path.x, path.y)

    def test_fast_block_scaled_by_epsilon(self):
        # with b = 0 the fast increment is sqrt(2/eps) rho dW versus sqrt(2) sigma dW
        model = _custom(by=0.0, rho0=1.0, s0=1.0, epsilon=0.25, horizon=0.5)
        path = integrate_two_scale(model, None, [0.0], [0.0], 0.025, seed=2)
        np.testing.assert_allclose(path.y, 2.0 * path.x, atol=1e-13)

    def test_stiffness_guard(self):
        model = make_benchmark("ou", {"epsilon": 0.1})
        with pytest.raises(StepSizeError) as info:
            integrate_two_scale(model, None, [0.0], [0.0], 0.05, seed=1)
        assert info.value.required == pytest.approx(0.01)

    def test_horizon_must_be_integral(self):
        with pytest.raises(ParameterError):
            steps_for(1.0, 0.3)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_blow_up_reports_time_and_state(self):
        model = _custom(by=0.0, epsilon=1.0, horizon=10.0).replace(
            b=lambda x, y: np.asarray(y) ** 3, rho_constant=False)
        with pytest.raises(BlowUpError) as info:
            integrate_two_scale(model, None, [0.0], [3.0], 0.1, seed=0)
        assert 0 < info.value.time <= 10.0
        assert info.value.state is not None

    def test_policy_outside_box_rejected(self):
        model = make_benchmark("lq_deep_relax", {"epsilon": 0.1, "horizon": 0.1})
        policy = ControlPolicy.feedback(model.control_set, lambda t, x, y: np.full((x.shape[0], 1), 2.0))
        with pytest.raises(ParameterError, match="bounding box"):
            integrate_two_scale(model, policy, [1.0], [0.0], 0.01, seed=0)

    def test_controls_recorded_in_box(self):
        model = make_benchmark("lq_deep_relax", {"epsilon": 0.1, "horizon": 0.1})
        policy = ControlPolicy.feedback(model.control_set, lambda t, x, y: np.clip(np.abs(y), 0, 1))
        path = integrate_two_scale(model, policy, [1.0], [0.0], 0.01, seed=0)
        assert path.u.min() >= 0 and path.u.max() <= 1

    def test_csv_header(self):
        model = make_benchmark("ou", {"epsilon": 0.1, "horizon": 0.02})
        text = integrate_two_scale(model, None, [0.0], [0.0], 0.01, seed=0).to_csv()
        lines = text.splitlines()
        assert lines[0] == "t,x_1,y_1,u_1" and len(lines) == 4


class TestFastSubsystem:
    def test_deterministic_decay(self):
        model = _custom(rho0=0.0)
        path = integrate_fast(model, [0.0], [1.0], 1.0, 0.001, seed=0)
        assert path.y[-1, 0] == pytest.approx(math.exp(-1.0), abs=2e-3)

    def test_ou_transition_moments(self):
        model = make_benchmark("ou")
        y = simulate_fast_ensemble(model, [0.0], [2.0], 1.0, 0.002, 100_000, seed=11, workers=4)[:, 0]
        mean, se = mean_and_se(y)
        assert abs(mean - 2 * math.exp(-1)) < 3 * se
        var = y.var(ddof=1)
        var_se = math.sqrt(np.var((y - y.mean()) ** 2) / len(y))
        assert abs(var - (1 - math.exp(-2))) < 3 * var_se

    def test_weak_order_one(self):
        model = make_benchmark("ou")
        exact = 2 * math.exp(-1)
        errors = []
        for dt in (0.2, 0.1, 0.05):
            y = simulate_fast_ensemble(model, [0.0], [2.0], 1.0, dt, 200_000, seed=3, workers=4)
            errors.append(exact - y.mean())
        assert 1.6 < errors[0] / errors[1] < 2.6
        assert 1.4 < errors[1] / errors[2] < 2.8

    @pytest.mark.parametrize("workers", [2, 4])
    def test_worker_count_invariance(self, workers):
        model = make_benchmark("ou")
        a = simulate_fast_ensemble(model, [0.0], [1.0], 0.5, 0.01, 9000, seed=4, workers=1, chunk_size=1000)
        b = simulate_fast_ensemble(model, [0.0], [1.0], 0.5, 0.01, 9000, seed=4, workers=workers,
                                   chunk_size=1000)
        np.testing.assert_array_equal(a, b)

    def test_ensemble_member_matches_single_path(self):
        model = make_benchmark("ou")
        ens = simulate_fast_ensemble(model, [0.0], [1.0], 0.5, 0.01, 10, seed=4)
        single = integrate_fast(model, [0.0], [1.0], 0.5, 0.01, seed=4, path_index=6)
        np.testing.assert_array_equal(ens[6], single.y[-1])

    def test_snapshots(self):
        model = make_benchmark("ou")
        final, snaps = simulate_fast_ensemble(model, [0.0], [1.0], 0.1, 0.01, 5, seed=1,
                                              snapshot_steps=[0, 10])
        assert snaps.shape == (2, 5, 1)
        assert np.all(snaps[0] == 1.0)
        np.testing.assert_array_equal(snaps[1], final)


class TestEnsembles:
    def test_path_ensemble_members_replay(self):
        model = make_benchmark("ou", {"epsilon": 0.1, "horizon": 0.2, "fy": 1.0})
        ens = simulate_path_ensemble(model, None, [0.0], [1.0], 0.01, 6, seed=2, record_every=5)
        assert ens.x.shape == (5, 6, 1) and len(ens) == 6
        single = integrate_two_scale(model, None, [0.0], [1.0], 0.01, seed=2, path_index=3)
        np.testing.assert_array_equal(ens.path(3).x, single.x[::5])
        mean, se = ens.mean_x()
        assert mean.shape == (5, 1) and se.shape == (5, 1)

    def test_terminal_states_match_path_ensemble(self):
        model = make_benchmark("ou", {"epsilon": 0.1, "horizon": 0.2, "fy": 1.0})
        xT, yT = simulate_ensemble(model, None, [0.0], [1.0], 0.01, 6, seed=2)
        ens = simulate_path_ensemble(model, None, [0.0], [1.0], 0.01, 6, seed=2, record_every=7)
        np.testing.assert_array_equal(ens.x[-1], xT)
        np.testing.assert_array_equal(ens.y[-1], yT)


class TestPayoff:
    def test_constant_reward(self):
        model = make_benchmark("ou", {"g0": 2.5, "horizon": 1.0})
        est = estimate_payoff(model, None, 0.0, [0.0], [0.0], 0.01, 200, seed=0)
        assert est.mean == 2.5 and est.standard_error == 0.0

    @pytest.mark.parametrize("lam,t", [(0.5, 0.0), (1.0, 0.4), (2.0, 0.9)])
    def test_discounted_constant(self, lam, t):
        model = make_benchmark("ou", {"g0": 2.0, "lam": lam, "horizon": 1.0})
        est = estimate_payoff(model, None, t, [0.0], [0.0], 0.01, 50, seed=0)
        assert est.mean == pytest.approx(2.0 * math.exp(lam * (t - 1.0)), rel=1e-12)

    @pytest.mark.parametrize("t", [0.0, 0.3])
    def test_running_reward_of_one(self, t):
        model = make_benchmark("ou", {"l0": 1.0, "horizon": 1.0})
        est = estimate_payoff(model, None, t, [0.0], [0.0], 0.01, 50, seed=0)
        assert est.mean == pytest.approx(1.0 - t, abs=0.01)

    @settings(max_examples=10, deadline=None)
    @given(st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3))
    def test_terminal_scaling_exact(self, c):
        base = make_benchmark("ou", {"gyy": 1.0, "epsilon": 0.1, "horizon": 0.1})
        scaled = make_benchmark("ou", {"gyy": c, "epsilon": 0.1, "horizon": 0.1})
        a = estimate_payoff(base, None, 0.0, [0.0], [1.0], 0.01, 100, seed=8)
        b = estimate_payoff(scaled, None, 0.0, [0.0], [1.0], 0.01, 100, seed=8)
        assert b.mean == pytest.approx(c * a.mean, rel=1e-12)

    def test_zero_paths_rejected(self):
        with pytest.raises(ParameterError):
            estimate_payoff(make_benchmark("ou"), None, 0.0, [0.0], [0.0], 0.01, 0, seed=0)


class TestValueLowerBound:
    def _dominance_model(self):
        model = _custom(u_lo=0.0, u_hi=1.0, n_controls=2, lxx=-1.0, by=-1.0, epsilon=0.1, horizon=1.0)
        return model.replace(f=lambda x, y, u: -np.asarray(u) * np.asarray(x))

    def test_dominating_policy_selected(self):
        model = self._dominance_model()
        cs = model.control_set
        family = [ControlPolicy.constant(cs, [0.0]), ControlPolicy.constant(cs, [1.0])]
        res = mc_value_lower_bound(model, family, 0.0, [1.0], [0.0], 0.01, 200, seed=0)
        assert res.best_policy_index == 1

    def test_duplicates_bit_equal(self):
        model = self._dominance_model()
        p = ControlPolicy.constant(model.control_set, [1.0])
        res = mc_value_lower_bound(model, [p, p], 0.0, [1.0], [0.0], 0.01, 200, seed=0)
        a, b = res.per_policy_values
        assert a.mean == b.mean and a.standard_error == b.standard_error

    def test_singleton_equals_payoff(self):
        model = make_benchmark("ou", {"gyy": 1.0, "epsilon": 0.1, "horizon": 0.2})
        p = ControlPolicy.constant(model.control_set, model.control_set.points[0])
        res = mc_value_lower_bound(model, [p], 0.0, [0.0], [1.0], 0.01, 300, seed=5)
        direct = estimate_payoff(model, p, 0.0, [0.0], [1.0], 0.01, 300, seed=5)
        assert res.best_value == direct.mean

    def test_empty_family_rejected(self):
        with pytest.raises(ParameterError):
            mc_value_lower_bound(make_benchmark("ou"), [], 0.0, [0.0], [0.0], 0.01, 10, seed=0)

    def test_grid_indexed_policy(self):
        cs = ControlSet.box([0.0], [1.0], 5)
        policy = ControlPolicy.grid_indexed(cs, lambda t, x, y: 3)
        u = policy(0.0, np.zeros((4, 1)), np.zeros((4, 1)))
        np.testing.assert_array_equal(u, 0.75)
        assert policy.tag == "grid-indexed"
