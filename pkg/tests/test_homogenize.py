import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twoscale import ergodic as E
from twoscale import homogenize as H
from twoscale.errors import ParameterError
from twoscale.model import make_benchmark


def _y2(y):
    return y[..., 0] ** 2


def _const(c):
    return lambda y: np.full(y.shape[:-1], float(c))


@pytest.fixture(scope="module")
def ou():
    return make_benchmark("ou")


@pytest.fixture(scope="module")
def ou_mu(ou):
    return E.sample_invariant_measure(ou, [0.0], 100_000, 5.0, 1.0, dt=0.01, seed=7, n_chains=10_000, workers=4)


@pytest.fixture(scope="module")
def lq():
    return make_benchmark("lq_deep_relax")


class TestSchedule:
    @pytest.mark.parametrize("n", [2.0, 4.0, 8.0])
    def test_delta_schedule(self, n):
        assert H.delta_schedule(n) == pytest.approx(n ** -4.5)
        assert H.delta_schedule(n, alpha=1.0) == pytest.approx(n ** -5.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-5, 5), st.floats(0.1, 3), st.floats(0.05, 0.9))
    def test_extrapolate_geometric(self, limit, amp, ratio):
        seq = [limit + amp * ratio**k for k in range(3)]
        value, method = H.extrapolate(seq)
        assert method == "aitken"
        assert value == pytest.approx(limit, abs=1e-8 * (1 + abs(limit)) / (1 - ratio))

    def test_extrapolate_falls_back_to_last(self):
        assert H.extrapolate([1.0, 2.0, 4.0]) == (4.0, "last")
        assert H.extrapolate([1.0, 0.5]) == (0.5, "last")


class TestFrozenHamiltonian:
    def test_lq_table(self, lq):
        x, y, p = 1.0, 0.5, 1.0
        table = H.hamiltonian_table(lq, 0.0, np.array([[x]]), np.array([[y]]), np.array([p]), np.array([[0.0]]))
        u = lq.control_set.points[:, 0]
        np.testing.assert_allclose(table[0], u * (x - y) * p / 0.5, atol=1e-14)

    def test_pointwise_min(self, lq):
        ys = np.array([[0.5], [2.0]])
        vals = H.frozen_hamiltonian(lq, 0.0, np.array([[1.0]]), ys, np.array([1.0]), np.array([[0.0]]))
        np.testing.assert_allclose(vals, [0.0, -2.0], atol=1e-14)


class TestCellProblem:
    def test_zero_field(self, ou):
        spec = H.CellProblemSpec.explicit(_const(0.0), 3.0, 0.1)
        assert H.feynman_kac_cell(ou, spec, [0.0], 0.01, 200, seed=0).estimate == 0.0
        np.testing.assert_array_equal(H.fd_cell_1d(ou, spec, 65).values, 0.0)

    def test_constant_field(self, ou):
        spec = H.CellProblemSpec.explicit(_const(2.5), 4.0, 0.05)
        est = H.feynman_kac_cell(ou, spec, [0.0], 0.02, 500, seed=1, workers=4)
        assert est.scaled == pytest.approx(2.5, rel=0.05)

    def test_ou_second_moment(self, ou):
        spec = H.CellProblemSpec.explicit(_y2, 6.0, 0.01)
        est = H.feynman_kac_cell(ou, spec, [0.0], 0.02, 1000, seed=2, workers=4)
        assert est.scaled == pytest.approx(1.0, abs=0.05)
        assert est.censoring_bias_bound > 0

    def test_query_outside_ball(self, ou):
        spec = H.CellProblemSpec.explicit(_y2, 3.0, 0.1)
        with pytest.raises(ParameterError, match="inside the ball"):
            H.feynman_kac_cell(ou, spec, [3.5], 0.01, 10, seed=0)

    def test_fd_versus_feynman_kac(self, ou):
        spec = H.CellProblemSpec.explicit(_y2, 3.0, 0.5)
        fd = H.fd_cell_1d(ou, spec, 2049)
        for y in (-2.0, -1.0, 0.0, 1.0, 2.0):
            est = H.feynman_kac_cell(ou, spec, [y], 0.002, 4000, seed=3, workers=4)
            ref = float(np.interp(y, fd.grid, fd.values))
            assert abs(est.estimate - ref) <= max(0.01 * abs(ref), 3 * est.standard_error)

    def test_fd_first_order(self, ou):
        spec = H.CellProblemSpec.explicit(_y2, 3.0, 0.5)
        probe = np.linspace(-2, 2, 9)
        u = [np.interp(probe, f.grid, f.values) for f in (H.fd_cell_1d(ou, spec, g) for g in (65, 129, 257))]
        ratio = np.max(np.abs(u[0] - u[1])) / np.max(np.abs(u[1] - u[2]))
        assert 1.7 < ratio < 2.6

    def test_fd_requires_1d(self):
        model = make_benchmark("ou", {"m": 2})
        spec = H.CellProblemSpec.explicit(lambda y: (y**2).sum(-1), 3.0, 0.5, m=2)
        with pytest.raises(ParameterError, match="m = 1"):
            H.fd_cell_1d(model, spec)

    @pytest.mark.parametrize("grid_points", [10, 64])
    def test_fd_min_grid(self, ou, grid_points):
        with pytest.raises(ParameterError):
            H.fd_cell_1d(ou, H.CellProblemSpec.explicit(_y2, 3.0, 0.5), grid_points)

    def test_spec_from_model_fits_growth(self, lq):
        spec = H.CellProblemSpec.from_model(lq, 0.0, [1.0], [1.0], [[0.0]], 3.0, 0.1)
        y = np.linspace(-3, 3, 61)[:, None]
        assert np.all(np.abs(spec.h(y)) <= spec.K_h * (1 + y[:, 0] ** 2) + 1e-12)

    def test_bad_delta(self):
        with pytest.raises(ParameterError):
            H.CellProblemSpec.explicit(_y2, 3.0, 0.0)


class TestCellLimit:
    def test_constant_field_limit(self):
        # strongly recurrent fast process so exits from these balls are negligible
        model = make_benchmark("ou", {"kappa": 4.0})
        res = H.effective_hamiltonian_cell_limit(
            model, 0.0, [0.0], None, None, [2.0, 3.0], h=_const(1.5),
            mc_params={"dt": 0.05, "n_paths": 200, "workers": 4})
        assert res["extrapolated"] == pytest.approx(1.5, rel=0.02)
        assert res["delta_schedule"] == pytest.approx([2.0 ** -4.5, 3.0 ** -4.5])

    def test_radii_must_increase(self, ou):
        with pytest.raises(ParameterError, match="increasing"):
            H.effective_hamiltonian_cell_limit(ou, 0.0, [0.0], None, None, [3.0, 2.0], h=_y2)


class TestAveraging:
    def test_constant_coefficients_exact(self, ou_mu):
        model = make_benchmark("ou", {"f0": 0.7, "s0": 0.3, "l0": 0.2})
        p, P = 1.5, 2.0
        val = H.effective_hamiltonian_avg(model, ou_mu, 0.0, [0.0], [p], [[P]])
        assert val == pytest.approx(-0.09 * P - 0.7 * p - 0.2, abs=1e-13)

    @pytest.mark.parametrize("p", [-2.0, 0.5, 3.0])
    def test_mean_zero_drift(self, ou_mu, p):
        model = make_benchmark("ou", {"fy": 1.0})
        val, se = H.effective_hamiltonian_avg(model, ou_mu, 0.0, [0.0], [p], [[0.0]], with_se=True)
        assert abs(val) < 3 * se

    def test_lq_sampled_against_oracle(self, lq, oracles):
        for row in oracles["lq_hbar"][::4]:
            mu = E.sample_invariant_measure(lq, [row["x"]], 100_000, 3.0, 0.5, dt=0.005, seed=4, n_chains=20_000,
                                            workers=4)
            val, se = H.effective_hamiltonian_avg(lq, mu, 0.0, [row["x"]], [row["p"]], [[0.0]], with_se=True)
            assert abs(val - row["value"]) < 3 * se + 5e-3 * abs(row["value"])

    def test_lq_quadrature_against_oracle(self, lq, oracles):
        for row in oracles["lq_hbar"]:
            rule = E.model_gibbs_rule(lq, [row["x"]])
            mu = E.EmpiricalMeasure(rule.nodes, rule.weights)
            val = H.effective_hamiltonian_avg(lq, mu, 0.0, [row["x"]], [row["p"]], [[0.0]])
            assert val == pytest.approx(row["value"], rel=3e-3, abs=1e-6)


class TestBellman:
    def test_control_free_equalities(self, ou_mu):
        model = make_benchmark("ou", {"fy": 1.0, "u_lo": 0.0, "u_hi": 1.0, "n_controls": 5})
        res = H.bellman_consistency(model, ou_mu, 0.0, [0.0], [1.0], [[0.0]], 20, seed=0)
        assert res["avg_of_pointwise_min"] == res["min_over_policies"] == res["argmin_selector_value"]

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 1000), st.floats(-2, 2), st.floats(-3, 3))
    def test_lower_bound_and_selector(self, seed, x, p):
        lq = make_benchmark("lq_deep_relax")
        mu = E.EmpiricalMeasure(np.random.default_rng(seed).normal(2 * x / 3, 0.6, (500, 1)))
        res = H.bellman_consistency(lq, mu, 0.0, [x], [p], [[0.0]], 25, seed=seed)
        assert all(res["avg_of_pointwise_min"] <= v for v in res["policy_values"])
        assert abs(res["argmin_selector_value"] - res["avg_of_pointwise_min"]) <= 1e-12
        assert res["verdict"]

    def test_random_policies_shape(self):
        pol = H.random_fast_policies(7, 33, seed=3)
        assert len(pol) == 7


class TestEffectiveCoefficients:
    def test_slow_only_sigma(self, ou_mu):
        model = make_benchmark("ou", {"s0": 0.6})
        c = H.effective_coefficients(model, ou_mu, 0.0, [0.0])
        np.testing.assert_allclose(c.sigma_bar, [[0.6]], rtol=1e-14)
        assert c.rigorous and not c.warnings

    def test_mean_zero_fbar(self, ou_mu):
        model = make_benchmark("ou", {"fy": 1.0})
        c = H.effective_coefficients(model, ou_mu, 0.0, [0.0])
        assert abs(c.f_bar[0]) < 3 * ou_mu.standard_error()[0]

    def test_psd_sqrt(self):
        root, clip = H.psd_sqrt(np.eye(3))
        np.testing.assert_allclose(root, np.eye(3), atol=1e-15)
        assert clip == 0.0
        root, clip = H.psd_sqrt(np.diag([4.0, -1e-12]))
        np.testing.assert_allclose(root, np.diag([2.0, 0.0]))
        assert clip == pytest.approx(1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_psd_sqrt_squares_back(self, seed):
        a = np.random.default_rng(seed).standard_normal((3, 3))
        s = a @ a.T
        root, _ = H.psd_sqrt(s)
        np.testing.assert_allclose(root @ root, s, atol=1e-10)
        np.testing.assert_allclose(root, root.T, atol=1e-12)

    def test_condition_d_warning(self, ou_mu):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            c = H.effective_coefficients(make_benchmark("ou"), ou_mu, 0.0, [0.0], condition_d=False)
        assert not c.rigorous and c.warnings
        assert any("condition (D)" in str(w.message) for w in caught)

    def test_policy_outside_set(self, lq, ou_mu):
        with pytest.raises(ParameterError):
            H.effective_coefficients(lq, ou_mu, 0.0, [0.0], policy=lambda y: np.full((len(y), 1), 3.0))


@pytest.fixture(scope="module")
def g_of_x(ou):
    g = lambda x, y: 2.0 + x[..., 0] + 0 * y[..., 0]
    return H.effective_terminal_data(ou, [0.5], [3.0, 4.0, 5.0], dt=0.02, n_paths=4000, seed=1, g=g,
                                     workers=4)


class TestTerminalData:
    def test_constant_in_y(self, g_of_x):
        assert g_of_x["raw_last"] == pytest.approx(2.5, rel=0.02)
        ne = [r["non_exit_probability"] for r in g_of_x["per_radius"]]
        for r in g_of_x["per_radius"]:
            assert r["estimate"] == pytest.approx(2.5 * r["non_exit_probability"], rel=1e-12)
        assert ne[-1] >= 0.99

    def test_schedule(self, g_of_x):
        assert [r["T"] for r in g_of_x["per_radius"]] == pytest.approx([9.0, 16.0, 25.0])

    def test_mean_zero(self, ou):
        res = H.effective_terminal_data(ou, [0.0], [3.0, 4.0], dt=0.02, n_paths=4000, seed=2,
                                        g=lambda x, y: y[..., 0], workers=4)
        assert abs(res["raw_last"]) < 0.02

    def test_nonexit_monotone_at_fixed_time(self, ou):
        # with t0 scaled so each radius uses the same horizon T = 4
        probs = []
        for n in (1.5, 2.0, 3.0):
            res = H.effective_terminal_data(ou, [0.0], [n], t0=4.0 / n**2, dt=0.02, n_paths=2000, seed=3,
                                            g=lambda x, y: 0 * y[..., 0])
            probs.append(res["per_radius"][0]["non_exit_probability"])
        assert probs[0] <= probs[1] <= probs[2]

    def test_start_outside_rejected(self, ou):
        with pytest.raises(ParameterError, match="smallest ball"):
            H.effective_terminal_data(ou, [0.0], [1.0, 2.0], y0=[1.0], n_paths=10)


class TestEffectiveHamiltonianEvaluator:
    def test_matches_avg(self, lq):
        grid = np.array([-1.0, 0.0, 1.0])
        hbar = H.EffectiveHamiltonian(lq, grid)
        p = np.array([0.5, -1.0, 2.0])
        vals = hbar(0.0, p, np.zeros(3))
        for xv, pv, v in zip(grid, p, vals):
            rule = E.model_gibbs_rule(lq, [xv])
            mu = E.EmpiricalMeasure(rule.nodes, rule.weights)
            assert v == pytest.approx(H.effective_hamiltonian_avg(lq, mu, 0.0, [xv], [pv], [[0.0]]), abs=1e-12)

    def test_terminal_average(self, lq):
        hbar = H.EffectiveHamiltonian(lq, np.array([0.0, 1.5]))
        np.testing.assert_allclose(hbar.terminal(), [-0.0, -2.25], atol=1e-12)
        g2 = lambda x, y: y[..., 0] ** 2
        np.testing.assert_allclose(hbar.terminal(g2), [1 / 3, 1 / 3 + 1.0], rtol=1e-10)
