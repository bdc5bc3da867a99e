import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twoscale import homogenize as H
from twoscale import hjb as J
from twoscale.errors import EllipticityError, MonotonicityError, ParameterError, StepSizeError
from twoscale.model import make_benchmark
from twoscale.sde import estimate_payoff

SMALL = J.GridSpec(-2.0, 2.0, 21, -3.0, 3.0, 25)


def _lq_exact(x, tau, q=1.0, gamma=0.5):
    return x**2 * math.exp(-2 * q * tau / (1 + q * gamma))


class TestGridAndField:
    def test_grid_validation(self):
        with pytest.raises(ParameterError):
            J.GridSpec(1.0, 1.0, 11)
        with pytest.raises(ParameterError):
            J.GridSpec(0.0, 1.0, 11, 0.0, 1.0, 2)

    def test_refined(self):
        g = SMALL.refined(2)
        assert (g.nx, g.ny) == (41, 49)
        h = g.refined(0.5)
        assert (h.nx, h.ny) == (21, 25)

    def test_interpolate_and_csv(self):
        model = make_benchmark("ou", {"gx": 1.0, "gy": 2.0, "epsilon": 0.5, "horizon": 0.1})
        V = J.solve_full_hjb(model, SMALL)
        assert V.interpolate(0.1, 0.3, 0.45)[0] == pytest.approx(0.3 + 0.9)
        lines = V.to_csv().splitlines()
        assert lines[0] == "t,x,y,V" and len(lines) == 1 + len(V.t) * 21 * 25
        with pytest.raises(ParameterError):
            V.slice_at(0.0123)


class TestFullSolver:
    def test_constants_preserved(self):
        model = make_benchmark("ou", {"g0": 1.75, "epsilon": 0.2})
        V = J.solve_full_hjb(model, SMALL)
        assert np.max(np.abs(V.values - 1.75)) < 1e-13

    @pytest.mark.parametrize("lam", [0.5, 2.0])
    def test_discount(self, lam):
        model = make_benchmark("ou", {"g0": 2.0, "lam": lam, "epsilon": 0.5})
        V = J.solve_full_hjb(model, SMALL)
        expected = 2.0 * np.exp(lam * (V.t - V.t[-1]))
        err = np.max(np.abs(V.values - expected[:, None, None]))
        assert err < 4 * lam * V.metadata["dt"]

    def test_terminal_slice_exact(self):
        model = make_benchmark("ou", {"gyy": 1.0, "gx": -0.5, "epsilon": 0.5})
        V = J.solve_full_hjb(model, SMALL)
        X, Y = np.meshgrid(SMALL.x, SMALL.y, indexing="ij")
        np.testing.assert_array_equal(V.values[-1], -0.5 * X + Y**2)

    def test_cfl_rejected_with_bound(self):
        model = make_benchmark("ou", {"gyy": 1.0, "epsilon": 0.1})
        grid = J.GridSpec(-2, 2, 21, -3, 3, 25, nt=10)
        with pytest.raises(StepSizeError) as info:
            J.solve_full_hjb(model, grid)
        assert 0 < info.value.required < 0.1

    def test_cross_term_monotonicity(self):
        model = make_benchmark("custom_1d", {"s0": 1.0, "rho0": 1.0, "epsilon": 0.25, "gyy": 1.0})
        grid = J.GridSpec(-2, 2, 21, -2, 2, 21)
        with pytest.raises(MonotonicityError) as info:
            J.solve_full_hjb(model, grid)
        assert set(info.value.node) >= {"x", "y"}

    def test_dimension_check(self):
        with pytest.raises(ParameterError, match="n = m = 1"):
            J.solve_full_hjb(make_benchmark("ou", {"m": 2}), SMALL)

    @settings(max_examples=8, deadline=None)
    @given(st.integers(0, 10_000))
    def test_discrete_comparison(self, seed):
        rng = np.random.default_rng(seed)
        model = make_benchmark("lq_deep_relax", {"epsilon": 0.5, "horizon": 0.2})
        base = rng.standard_normal((21, 25))
        bump = np.abs(rng.standard_normal((21, 25)))
        xs, ys = SMALL.x, SMALL.y

        def table(vals):
            def g(x, y):
                i = np.rint((x[:, 0] - xs[0]) / (xs[1] - xs[0])).astype(int)
                j = np.rint((y[:, 0] - ys[0]) / (ys[1] - ys[0])).astype(int)
                return vals[i, j]
            return g

        lo = J.solve_full_hjb(model, SMALL, terminal=table(base))
        hi = J.solve_full_hjb(model, SMALL, terminal=table(base + bump))
        assert np.all(hi.values >= lo.values - 1e-12)

    def test_growth_fit(self):
        model = make_benchmark("lq_deep_relax", {"epsilon": 0.5, "gyy": 0.5})
        grid = J.GridSpec(-3, 3, 33, -3, 3, 33)
        a = J.solve_full_hjb(model, grid)
        b = J.solve_full_hjb(model, grid.refined(2))
        w = 1 + a.x[:, None] ** 2 + a.y[None, :] ** 2
        assert np.all(np.abs(a.values) <= a.growth_K * w)
        assert b.growth_K == pytest.approx(a.growth_K, rel=0.10)

    def test_against_monte_carlo(self):
        model = make_benchmark("ou", {"g0": 2.0, "gyy": 1.0, "epsilon": 0.5, "horizon": 0.5})
        V = J.solve_full_hjb(model, J.GridSpec(-1, 1, 5, -5, 5, 201))
        for y in (-1.0, -0.5, 0.0, 0.75, 1.5):
            ref = V.interpolate(0.0, 0.0, y)[0]
            est = estimate_payoff(model, None, 0.0, [0.0], [y], 0.005, 8000, seed=1, workers=4)
            assert abs(est.mean - ref) <= max(0.02 * abs(ref), 3 * est.standard_error)


class TestEffectiveSolver:
    def test_transport(self):
        errs = []
        for nx in (101, 201):
            grid = J.GridSpec(-2, 2, nx)
            V = J.solve_effective_hjb(lambda t, x, p, P: -p, lambda x: x[:, 0], grid, 1.0)
            exact = V.x[None, :] + (V.t[-1] - V.t)[:, None]
            errs.append(np.max(np.abs(V.values - exact)))
        assert errs[0] < 1e-10 and errs[1] < 1e-10

    def test_constant(self):
        grid = J.GridSpec(-2, 2, 51)
        V = J.solve_effective_hjb(lambda t, x, p, P: -p * np.abs(x) - P, lambda x: 0 * x[:, 0] + 3.0, grid, 1.0)
        assert np.max(np.abs(V.values - 3.0)) < 1e-13

    def test_lq_frozen_policy_bellman(self):
        grid = J.GridSpec(-3, 3, 1201)
        fb = (-grid.x / 1.5)[:, None]
        tables = lambda t: (fb, np.zeros_like(fb), np.zeros_like(fb))
        V = J.solve_effective_hjb(None, lambda x: x[:, 0] ** 2, grid, 1.0, tables=tables)
        for xv in (0.5, 1.0, 1.5):
            assert V.interpolate(0.0, xv)[0] == pytest.approx(_lq_exact(xv, 1.0), rel=0.01)

    def test_lq_frozen_policy_lax_friedrichs_first_order(self):
        errs = []
        for nx in (601, 1201, 2401):
            grid = J.GridSpec(-3, 3, nx)
            V = J.solve_effective_hjb(lambda t, x, p, P: x * p / 1.5, lambda x: x[:, 0] ** 2, grid, 1.0)
            errs.append(abs(V.interpolate(0.0, 1.0)[0] - _lq_exact(1.0, 1.0)))
        assert 1.7 < errs[0] / errs[1] < 2.3 and 1.7 < errs[1] / errs[2] < 2.3

    def test_ellipticity_probe(self):
        grid = J.GridSpec(-1, 1, 21)
        with pytest.raises(EllipticityError):
            J.solve_effective_hjb(lambda t, x, p, P: P, lambda x: x[:, 0], grid, 1.0)

    def test_evaluator_grid_mismatch(self):
        lq = make_benchmark("lq_deep_relax")
        hbar = H.EffectiveHamiltonian(lq, np.linspace(-1, 1, 11))
        with pytest.raises(ParameterError, match="different x grid"):
            J.solve_effective_hjb(hbar, np.zeros(21), J.GridSpec(-1, 1, 21), 1.0)

    def test_cfl_rejected(self):
        with pytest.raises(StepSizeError):
            J.solve_effective_hjb(lambda t, x, p, P: -p, lambda x: x[:, 0], J.GridSpec(-2, 2, 201, nt=10), 1.0)

    def test_constant_control_tables_bound_value(self):
        # tables optimise over controls constant in y, a subset of fast-feedback policies
        lq = make_benchmark("lq_deep_relax", {"gxx": -1.0})
        grid = J.GridSpec(-3, 3, 241)
        hbar = H.EffectiveHamiltonian(lq, grid.x)
        a = J.solve_effective_hjb(hbar, hbar.terminal(), grid, lq.horizon)
        b = J.solve_effective_hjb(None, hbar.terminal(), grid, lq.horizon, tables=hbar.coefficient_tables)
        mid = np.abs(grid.x) <= 1.5
        assert np.all(b.values[:, mid] <= a.values[:, mid] + 0.03)
        assert np.max(a.values[:, mid] - b.values[:, mid]) > 0.1


@pytest.fixture(scope="module")
def study():
    lq = make_benchmark("lq_deep_relax", {"gxx": -1.0})
    grid = J.GridSpec(-3, 3, 33, -3, 3, 33)
    hbar = H.EffectiveHamiltonian(lq, grid.x)
    return J.convergence_study(lq, [0.5, 0.1, 0.02], grid, hbar, hbar.terminal(), lambda x: x / 1.5)


class TestConvergenceStudy:
    def test_spread_shrinks(self, study):
        assert study["spread_decreasing"]
        assert study["spreads"][-1] < 0.1 * study["spreads"][0]

    def test_report_fields(self, study):
        assert study["epsilons"] == [0.5, 0.1, 0.02]
        assert len(study["gaps"]) == 3 and study["grid_error"] is None
        assert all(r["inward"] for r in study["runs"])

    def test_epsilons_must_decrease(self):
        lq = make_benchmark("lq_deep_relax")
        with pytest.raises(ParameterError, match="decreasing"):
            J.convergence_study(lq, [0.1, 0.5], SMALL, None, None, lambda x: x)

    def test_probe_mask(self):
        axis = np.linspace(-3, 3, 13)
        m = J.ProbeBox().mask(axis)
        assert axis[m].min() == -1.5 and axis[m].max() == 1.5
