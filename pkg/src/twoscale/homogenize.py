"""Effective Hamiltonian and effective terminal data of the fast-averaged problem.

Two routes are provided for each effective object: direct averaging against an
invariant measure, and the truncated discounted cell problem (or truncated
Cauchy problem) solved by Feynman-Kac Monte Carlo, with a 1D finite-difference
solver as a deterministic cross-check.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from .errors import ParameterError
from .ergodic import EmpiricalMeasure, GibbsRule, model_gibbs_rule
from .numerics import aitken_limit, mean_and_se, tree_sum
from .parallel import DEFAULT_CHUNK, map_chunks
from .rng import as_noise
from .sde import _RadialStepper, _per_path, bridge_exit_probability

DEFAULT_ALPHA = 0.5
DEFAULT_HORIZON_FACTOR = 6.0


def delta_schedule(radius, alpha=DEFAULT_ALPHA):
    """Discount rate ``n ** -(4 + alpha)`` paired with radius ``n``."""
    return float(radius) ** -(4.0 + alpha)


def _as_vec(v, dim, label):
    a = np.atleast_1d(np.asarray(v, dtype=float)).ravel()
    if a.size != dim:
        raise ParameterError(f"{label} must have {dim} entries")
    return a


def _as_mat(v, dim, label):
    a = np.asarray(v, dtype=float)
    if a.ndim == 0 and dim == 1:
        a = a.reshape(1, 1)
    if a.shape != (dim, dim):
        raise ParameterError(f"{label} must be a {dim}x{dim} matrix")
    return a


# ---------------------------------------------------------------------------
# frozen Hamiltonian tables


def hamiltonian_table(model, t, x, y, p, P):
    """``F[i, j] = -tr(sigma sigma^T P) - f.p - ell`` at fast points ``y[i]`` and control ``j``.

    This is the frozen Hamiltonian integrand with the mixed-derivative argument
    set to zero, before minimization over controls.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    x = _as_vec(x, model.n, "x")
    p = _as_vec(p, model.n, "p")
    P = _as_mat(P, model.n, "P")
    U = model.control_set.points
    N, K = len(y), len(U)
    Y = np.repeat(y, K, axis=0)
    X = np.broadcast_to(x, (N * K, model.n))
    Uu = np.tile(U, (N, 1))
    f = np.asarray(model.f(X, Y, Uu), dtype=float)
    s = np.asarray(model.sigma_limit(X, Y, Uu), dtype=float)
    ell = np.asarray(model.ell(t, X, Y, Uu), dtype=float)
    ss = s @ np.swapaxes(s, -1, -2)
    tr = np.einsum("pij,ij->p", ss, P)
    return (-tr - f @ p - ell).reshape(N, K)


def frozen_hamiltonian(model, t, x, y, p, P, chunk=4096):
    """``H(t, x, y, p, P, 0)`` by exhaustive minimization over the control grid."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    out = [hamiltonian_table(model, t, x, y[a:a + chunk], p, P).min(axis=1) for a in range(0, len(y), chunk)]
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# cell problem


@dataclass
class CellProblemSpec:
    """Truncated discounted cell problem ``delta u - L u = -h`` on the ball of radius n.

    Build it from a model with :meth:`from_model` (``h`` is the frozen
    Hamiltonian) or from an explicit field with :meth:`explicit`.
    """

    h: Callable
    radius: float
    delta: float
    x: np.ndarray
    t: float = 0.0
    p: Optional[np.ndarray] = None
    P: Optional[np.ndarray] = None
    K_h: float = 0.0
    label: str = "explicit"
    m: int = 1

    def __post_init__(self):
        if not self.delta > 0:
            raise ParameterError("delta > 0 violated")
        if not self.radius > 0:
            raise ParameterError("radius > 0 violated")
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if not self.K_h:
            self.K_h = self._fit_growth()

    def _fit_growth(self, n_probe=401):
        """Growth constant of h on the ball, with a 1% slack."""
        if self.m == 1:
            pts = np.linspace(-self.radius, self.radius, n_probe)[:, None]
        else:
            rng = np.random.default_rng(0)
            z = rng.standard_normal((n_probe * 4, self.m))
            r = self.radius * rng.uniform(0, 1, (len(z), 1)) ** (1.0 / self.m)
            pts = r * z / np.linalg.norm(z, axis=1, keepdims=True)
        vals = np.asarray(self.h(pts), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ParameterError("h must be finite on the closed ball")
        return float(np.max(np.abs(vals) / (1.0 + np.sum(pts**2, axis=1)))) * 1.01

    @classmethod
    def explicit(cls, h, radius, delta, x=(0.0,), m=1):
        return cls(h, radius, delta, x, m=m)

    @classmethod
    def from_model(cls, model, t, x, p, P, radius, delta):
        x = _as_vec(x, model.n, "x")
        p = _as_vec(p, model.n, "p")
        P = _as_mat(P, model.n, "P")

        def h(y):
            return frozen_hamiltonian(model, t, x, y, p, P)

        return cls(h, radius, delta, x, t, p, P, label="frozen_hamiltonian", m=model.m)


def _killed_chunk(model, x, y, dt, n_steps, noise, paths, radius, bridge, integrand=None, delta=0.0, block=128):
    """Run the fast subsystem until exit from the ball or ``n_steps``.

    Returns ``(alive, y_final, acc)`` where ``acc`` is the left-endpoint
    integral of ``integrand(y) * exp(-delta t)`` up to exit.
    """
    P = len(paths)
    alive = np.ones(P, dtype=bool)
    acc = np.zeros(P)
    active = np.arange(P)
    stepper = _RadialStepper(model, dt)
    sq = np.sqrt(dt)
    k = 0
    while k < n_steps and len(active):
        nb = min(block, n_steps - k)
        p_act = paths[active]
        dW = noise.normals(p_act, k, nb, model.r) * sq
        incr = stepper.increments(dW)
        unif = noise.uniforms(p_act, k, nb) if bridge else None
        xa, ya = x[active], y[active]
        al = alive[active]
        ac = acc[active]
        for j in range(nb):
            t = (k + j) * dt
            if integrand is not None:
                ac = ac + np.where(al, np.asarray(integrand(ya), dtype=float), 0.0) * (math.exp(-delta * t) * dt)
            y_new, n_new, n_old, a = stepper.step(xa, ya, dW[j], None if incr is None else incr[j], t + dt,
                                                  radial=bridge)
            hit = n_new >= radius
            if bridge:
                hit |= unif[j] < bridge_exit_probability(radius, n_old, n_new, a, dt)
            al = al & ~hit
            # dead paths keep their last live state
            ya = np.where(al[:, None], y_new, ya)
        y[active] = ya
        alive[active] = al
        acc[active] = ac
        k += nb
        active = active[alive[active]]
    return alive, y, acc


@dataclass
class CellEstimate:
    estimate: float
    standard_error: float
    censoring_bias_bound: float
    exit_fraction: float
    censor_horizon: float
    delta: float
    radius: float

    @property
    def scaled(self):
        """``-delta * u``, the quantity that converges to the average of h."""
        return -self.delta * self.estimate

    def to_dict(self):
        return {
            "estimate": self.estimate,
            "standard_error": self.standard_error,
            "censoring_bias_bound": self.censoring_bias_bound,
            "exit_fraction": self.exit_fraction,
            "censor_horizon": self.censor_horizon,
            "delta": self.delta,
            "radius": self.radius,
            "minus_delta_u": self.scaled,
            "minus_delta_u_se": self.delta * self.standard_error,
        }


def feynman_kac_cell(model, spec: CellProblemSpec, y, dt, n_paths, seed, censor_horizon=None, workers=1,
                     bridge=True, chunk_size=DEFAULT_CHUNK) -> CellEstimate:
    """Monte Carlo solution ``u(y) = E[-int_0^tau h(Y) exp(-delta t) dt]`` of the cell problem.

    Paths are killed on exit from the ball (with a Brownian-bridge crossing
    test) or censored at ``censor_horizon`` (default ``6 / delta``).
    """
    y = _as_vec(y, model.m, "y")
    if np.linalg.norm(y) >= spec.radius:
        raise ParameterError("query point must lie inside the ball")
    if n_paths < 1:
        raise ParameterError("n_paths >= 1 required")
    if censor_horizon is None:
        censor_horizon = DEFAULT_HORIZON_FACTOR / spec.delta
    n_steps = int(math.ceil(censor_horizon / dt - 1e-9))
    horizon = n_steps * dt
    noise = as_noise(seed)
    x = _as_vec(spec.x, model.n, "x")

    def integrand(ys):
        return -np.asarray(spec.h(ys), dtype=float)

    def work(a, b):
        paths = np.arange(a, b, dtype=np.int64)
        xa = _per_path(x, model.n, a, b, "x")
        ya = _per_path(y, model.m, a, b, "y")
        alive, _, acc = _killed_chunk(model, xa, ya, dt, n_steps, noise, paths, spec.radius, bridge,
                                      integrand, spec.delta)
        return np.stack([acc, alive.astype(float)])

    res = np.concatenate(map_chunks(work, n_paths, workers, chunk_size), axis=1)
    mean, se = mean_and_se(res[0])
    bias = spec.K_h * (1.0 + spec.radius**2) * math.exp(-spec.delta * horizon) / spec.delta
    return CellEstimate(float(mean), float(se), bias, float(1.0 - res[1].mean()), horizon, spec.delta,
                        float(spec.radius))


@dataclass
class FieldOnGrid:
    grid: np.ndarray
    values: np.ndarray

    def __call__(self, y):
        return np.interp(np.asarray(y, dtype=float), self.grid, self.values)


def fd_cell_1d(model, spec: CellProblemSpec, grid_points=513) -> FieldOnGrid:
    """Finite-difference solution of ``delta u - b u' - a u'' = -h`` on ``[-n, n]``, u = 0 at the ends.

    Central second differences and first differences upwinded in the sign of
    ``b`` give an M-matrix, solved as a tridiagonal system.
    """
    if model.m != 1:
        raise ParameterError("fd_cell_1d requires m = 1")
    if grid_points < 65:
        raise ParameterError("grid_points >= 65 required")
    n = spec.radius
    grid = np.linspace(-n, n, grid_points)
    h = grid[1] - grid[0]
    yi = grid[1:-1, None]
    x = np.broadcast_to(_as_vec(spec.x, model.n, "x"), (len(yi), model.n))
    b = np.asarray(model.b(x, yi), dtype=float)[:, 0]
    rho = np.asarray(model.rho(x, yi), dtype=float)
    a = np.einsum("pij,pij->p", rho, rho)
    src = -np.asarray(spec.h(yi), dtype=float)
    bp = np.maximum(b, 0.0)
    bm = np.minimum(b, 0.0)
    lower = -a / h**2 + bm / h  # coefficient of u_{i-1}
    upper = -a / h**2 - bp / h  # coefficient of u_{i+1}
    diag = spec.delta + 2 * a / h**2 + (bp - bm) / h
    M = len(yi)
    ab = np.zeros((3, M))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    u = solve_banded((1, 1), ab, src)
    return FieldOnGrid(grid, np.concatenate([[0.0], u, [0.0]]))


# ---------------------------------------------------------------------------
# effective Hamiltonian


def effective_hamiltonian_avg(model, mu: EmpiricalMeasure, t, x, p, P, with_se=False):
    """Average of the frozen Hamiltonian against ``mu``."""
    vals = frozen_hamiltonian(model, t, x, mu.points, p, P)
    mean = float(tree_sum(mu.weights * vals))
    if not with_se:
        return mean
    se = float(mu.standard_error(lambda y: frozen_hamiltonian(model, t, x, y, p, P)).ravel()[0])
    return mean, se


def extrapolate(values):
    """Geometric extrapolation with three or more terms, else the last term."""
    if len(values) >= 3:
        lim = aitken_limit(values)
        if lim is not None:
            return lim, "aitken"
    return float(values[-1]), "last"


def effective_hamiltonian_cell_limit(model, t, x, p, P, radius_list, alpha=DEFAULT_ALPHA, mc_params=None, h=None):
    """Sequence ``-delta(n) u(0)`` over radii and its extrapolated limit.

    ``mc_params`` holds ``dt`` (default 0.05), ``n_paths`` (64), ``seed`` (0),
    ``horizon_factor`` (6, censoring at ``horizon_factor / delta``), ``workers``
    and ``bridge``. Pass ``h`` to replace the frozen Hamiltonian by an explicit
    field (the cell problem then ignores p and P).
    """
    radii = [float(v) for v in radius_list]
    if not radii or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ParameterError("radius_list must be increasing")
    if not alpha > 0:
        raise ParameterError("alpha > 0 violated")
    mc = {"dt": 0.05, "n_paths": 64, "seed": 0, "horizon_factor": DEFAULT_HORIZON_FACTOR, "workers": 1,
          "bridge": True}
    mc.update(mc_params or {})
    terms, ses, records = [], [], []
    for rad in radii:
        delta = delta_schedule(rad, alpha)
        if h is None:
            spec = CellProblemSpec.from_model(model, t, x, p, P, rad, delta)
        else:
            spec = CellProblemSpec.explicit(h, rad, delta, x, model.m)
        est = feynman_kac_cell(model, spec, np.zeros(model.m), mc["dt"], int(mc["n_paths"]), mc["seed"],
                               mc["horizon_factor"] / delta, mc["workers"], mc["bridge"])
        terms.append(est.scaled)
        ses.append(est.delta * est.standard_error)
        records.append(est.to_dict())
    limit, method = extrapolate(terms)
    return {
        "method": "cell_limit",
        "t": float(t),
        "x": _as_vec(x, model.n, "x").tolist(),
        "p": None if p is None else np.atleast_1d(np.asarray(p, dtype=float)).tolist(),
        "P": None if P is None else np.atleast_1d(np.asarray(P, dtype=float)).ravel().tolist(),
        "radii": radii,
        "delta_schedule": [delta_schedule(r, alpha) for r in radii],
        "alpha": alpha,
        "estimates": terms,
        "SEs": ses,
        "raw_last": terms[-1],
        "extrapolated": limit,
        "extrapolation": method,
        "per_radius": records,
    }


# ---------------------------------------------------------------------------
# exchange of min and average


def random_fast_policies(n_policies, n_controls, seed, n_cells=32):
    """Random piecewise-constant maps from the (first) fast coordinate to control indices.

    Each policy splits the sample range into ``n_cells`` equal cells and assigns
    a uniformly random control index to each.
    """
    rng = np.random.default_rng(seed)
    return rng.integers(0, n_controls, size=(n_policies, n_cells))


def bellman_consistency(model, mu: EmpiricalMeasure, t, x, p, P, n_random_policies=100, seed=0, n_cells=32):
    """Compare the average of the pointwise minimum with policy values on shared samples."""
    F = np.concatenate([hamiltonian_table(model, t, x, mu.points[a:a + 4096], p, P)
                        for a in range(0, len(mu), 4096)])
    w = mu.weights
    pointwise = F.min(axis=1)
    avg_min = float(tree_sum(w * pointwise))
    sel = np.argmin(F, axis=1)
    selector_value = float(tree_sum(w * F[np.arange(len(F)), sel]))
    y1 = mu.points[:, 0]
    lo, hi = float(y1.min()), float(y1.max())
    cell = np.clip(((y1 - lo) / max(hi - lo, 1e-300) * n_cells).astype(np.int64), 0, n_cells - 1)
    tables = random_fast_policies(n_random_policies, F.shape[1], seed, n_cells)
    values = [float(tree_sum(w * F[np.arange(len(F)), tab[cell]])) for tab in tables]
    min_over = min(values) if values else float("inf")
    lower_ok = all(avg_min <= v for v in values)
    exchange_gap = abs(selector_value - avg_min)
    return {
        "avg_of_pointwise_min": avg_min,
        "min_over_policies": min_over,
        "argmin_selector_value": selector_value,
        "policy_values": values,
        "exchange_gap": exchange_gap,
        "verdict": bool(lower_ok and exchange_gap <= 1e-12),
    }


# ---------------------------------------------------------------------------
# effective coefficients


@dataclass
class EffectiveCoefficients:
    x: np.ndarray
    sigma_bar: np.ndarray
    sigma_sq_bar: np.ndarray
    f_bar: np.ndarray
    ell_bar: float
    clip_magnitude: float
    rigorous: bool
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "x": self.x.tolist(),
            "sigma_bar": self.sigma_bar.tolist(),
            "sigma_sq_bar": self.sigma_sq_bar.tolist(),
            "f_bar": self.f_bar.tolist(),
            "ell_bar": self.ell_bar,
            "clip_magnitude": self.clip_magnitude,
            "rigorous": self.rigorous,
            "warnings": list(self.warnings),
        }


def psd_sqrt(a):
    """Principal square root of a symmetric matrix; returns ``(root, clipped magnitude)``."""
    sym = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(sym)
    clip = float(max(0.0, -vals.min()))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T, clip


def check_condition_d(model, mu: EmpiricalMeasure, x, tol=1e-12):
    """Whether sigma sigma^T ignores (y, u) on the samples, or b ignores x near ``x``."""
    x = _as_vec(x, model.n, "x")
    U = model.control_set.points
    N = min(len(mu), 512)
    y = mu.points[:N]
    Y = np.repeat(y, len(U), axis=0)
    Uu = np.tile(U, (N, 1))
    X = np.broadcast_to(x, (len(Y), model.n))
    s = np.asarray(model.sigma_limit(X, Y, Uu), dtype=float)
    ss = s @ np.swapaxes(s, -1, -2)
    case_a = bool(np.all(np.abs(ss - ss[:1]) <= tol))
    case_b = True
    for shift in (-1.0, 1.0):
        xs = np.broadcast_to(x + shift, (N, model.n))
        b0 = np.asarray(model.b(np.broadcast_to(x, (N, model.n)), y))
        b1 = np.asarray(model.b(xs, y))
        case_b &= bool(np.all(np.abs(b1 - b0) <= tol))
    return case_a, case_b


def effective_coefficients(model, mu: EmpiricalMeasure, t, x, policy: Optional[Callable] = None,
                           condition_d: Optional[bool] = None) -> EffectiveCoefficients:
    """Averages of sigma sigma^T, f and ell under ``mu`` and a fast-feedback policy.

    ``policy`` maps fast points (N, m) to control points (N, k); the default is
    the first control point everywhere.
    """
    x = _as_vec(x, model.n, "x")
    y = mu.points
    N = len(y)
    if policy is None:
        u = np.broadcast_to(model.control_set.points[0], (N, model.control_set.k))
    else:
        u = np.asarray(policy(y), dtype=float).reshape(N, model.control_set.k)
        cs = model.control_set
        if np.any(u < cs.lower - 1e-12) or np.any(u > cs.upper + 1e-12):
            raise ParameterError("policy returned a control outside the control set")
    X = np.broadcast_to(x, (N, model.n))
    s = np.asarray(model.sigma_limit(X, y, u), dtype=float)
    ss = tree_sum(mu.weights[:, None, None] * (s @ np.swapaxes(s, -1, -2)))
    f_bar = tree_sum(mu.weights[:, None] * np.asarray(model.f(X, y, u), dtype=float))
    ell_bar = float(tree_sum(mu.weights * np.asarray(model.ell(t, X, y, u), dtype=float)))
    root, clip = psd_sqrt(ss)
    notes = []
    if condition_d is None:
        a, b = check_condition_d(model, mu, x)
        condition_d = a or b
    if not condition_d:
        notes.append("condition (D) not validated; coefficients are heuristic")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    return EffectiveCoefficients(x, root, ss, f_bar, ell_bar, clip, bool(condition_d), notes)


# ---------------------------------------------------------------------------
# effective terminal data


def effective_terminal_data(model, x, radius_list, t0=1.0, dt=0.01, n_paths=20_000, seed=0, y0=None, g=None,
                            workers=1, bridge=True):
    """Indicator-weighted terminal rewards on the schedule ``T(n) = n^2 t0``.

    Each radius reuses the same noise streams. Returns per-radius estimates,
    non-exit probabilities and the extrapolated limit.
    """
    radii = [float(v) for v in radius_list]
    if not radii or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ParameterError("radius_list must be increasing")
    if not t0 > 0:
        raise ParameterError("t0 > 0 violated")
    x = _as_vec(x, model.n, "x")
    y0 = np.zeros(model.m) if y0 is None else _as_vec(y0, model.m, "y0")
    if np.linalg.norm(y0) >= radii[0]:
        raise ParameterError("y0 must lie inside the smallest ball")
    noise = as_noise(seed)
    g = g or model.g
    records = []
    for rad in radii:
        T = rad * rad * t0
        n_steps = int(math.ceil(T / dt - 1e-9))

        def work(a, b, rad=rad, n_steps=n_steps):
            paths = np.arange(a, b, dtype=np.int64)
            xa = _per_path(x, model.n, a, b, "x")
            ya = _per_path(y0, model.m, a, b, "y0")
            alive, yf, _ = _killed_chunk(model, xa, ya, dt, n_steps, noise, paths, rad, bridge)
            vals = np.where(alive, np.asarray(g(xa, yf), dtype=float), 0.0)
            return np.stack([vals, alive.astype(float)])

        res = np.concatenate(map_chunks(work, n_paths, workers), axis=1)
        mean, se = mean_and_se(res[0])
        records.append({"radius": rad, "T": n_steps * dt, "estimate": float(mean), "standard_error": float(se),
                        "non_exit_probability": float(res[1].mean())})
    limit, method = extrapolate([r["estimate"] for r in records])
    return {
        "method": "cauchy_dirichlet",
        "x": x.tolist(),
        "t0": t0,
        "radii": radii,
        "per_radius": records,
        "estimates": [r["estimate"] for r in records],
        "SEs": [r["standard_error"] for r in records],
        "raw_last": records[-1]["estimate"],
        "extrapolated": limit,
        "extrapolation": method,
    }


# ---------------------------------------------------------------------------
# effective Hamiltonian evaluator for grid solvers


class EffectiveHamiltonian:
    """Vectorized ``Hbar(t, x, p, P)`` on a fixed slow grid.

    For each slow node an invariant-measure rule (Gibbs quadrature when the
    model knows its fast density, else a supplied sampler) is combined with
    the control grid into coefficient tables. ``p_bound`` and ``P_bound``
    bound the sensitivities of ``Hbar`` in p and P and feed the CFL rule of
    the effective solver.
    """

    def __init__(self, model, x_grid, measure=None, n_nodes=257):
        if model.n != 1:
            raise ParameterError("EffectiveHamiltonian supports n = 1")
        self.model = model
        self.x_grid = np.asarray(x_grid, dtype=float)
        rules = []
        for xv in self.x_grid:
            if measure is None:
                rule = model_gibbs_rule(model, [xv], n_nodes)
                rules.append((rule.nodes, rule.weights))
            else:
                mu = measure(xv)
                rules.append((mu.points, mu.weights))
        size = max(len(r[0]) for r in rules)
        U = model.control_set.points
        K = len(U)
        nx = len(self.x_grid)
        self.weights = np.zeros((nx, size))
        self._nodes = np.zeros((nx, size, model.m))
        for i, (nodes, w) in enumerate(rules):
            self.weights[i, :len(w)] = w
            self._nodes[i, :len(w)] = nodes
            if len(w) < size:
                self._nodes[i, len(w):] = nodes[0]
        X = np.broadcast_to(self.x_grid[:, None, None, None], (nx, size, K, 1)).reshape(-1, 1)
        Y = np.broadcast_to(self._nodes[:, :, None, :], (nx, size, K, model.m)).reshape(-1, model.m)
        Uu = np.broadcast_to(U[None, None], (nx, size, K, U.shape[1])).reshape(-1, U.shape[1])
        self._X, self._Y, self._U = X, Y, Uu
        shape = (nx, size, K)
        self.f = np.asarray(model.f(X, Y, Uu), dtype=float)[:, 0].reshape(shape)
        s = np.asarray(model.sigma_limit(X, Y, Uu), dtype=float)
        self.ss = np.einsum("pij,pij->p", s, s).reshape(shape)
        self._shape = shape
        self._ell_cache = None
        if model.ell_autonomous:
            self._ell_cache = np.asarray(model.ell(0.0, X, Y, Uu), dtype=float).reshape(shape)
        absf = np.abs(self.f).max(axis=2)
        self.p_bound = float(np.max(np.sum(self.weights * absf, axis=1)))
        self.P_bound = float(np.max(np.sum(self.weights * self.ss.max(axis=2), axis=1)))

    def ell(self, t):
        if self._ell_cache is not None:
            return self._ell_cache
        return np.asarray(self.model.ell(t, self._X, self._Y, self._U), dtype=float).reshape(self._shape)

    def __call__(self, t, p, P):
        """``Hbar`` at every slow node; ``p`` and ``P`` are arrays over the slow grid."""
        p = np.asarray(p, dtype=float)[:, None, None]
        P = np.asarray(P, dtype=float)[:, None, None]
        F = -self.ss * P - self.f * p - self.ell(t)
        return np.sum(self.weights * F.min(axis=2), axis=1)

    def terminal(self, g=None):
        """Effective terminal data ``gbar`` on the slow grid."""
        g = g or self.model.g
        X = self.x_grid[:, None, None]
        vals = np.asarray(g(np.broadcast_to(X, self._nodes.shape[:2] + (1,)), self._nodes), dtype=float)
        return np.sum(self.weights * vals, axis=1)

    def coefficient_tables(self, t):
        """Per-node, per-control averages ``(fbar, Sbar, ellbar)`` of f, sigma sigma^T and ell."""
        w = self.weights[:, :, None]
        return (np.sum(w * self.f, axis=1), np.sum(w * self.ss, axis=1), np.sum(w * self.ell(t), axis=1))
