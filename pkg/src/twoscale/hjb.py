"""Explicit monotone finite-difference solvers for the full and effective HJB equations.

Both solvers march backward from the terminal data. The full solver works on
an (x, y) grid with the fast operator scaled by 1/epsilon; the effective solver
works on an x grid with either a black-box effective Hamiltonian (Lax-Friedrichs
numerical Hamiltonian) or tables of averaged coefficients (Bellman form).
Lateral boundaries use one-sided first differences and a vanishing second
difference (linear extrapolation); this is an artificial truncation of a
whole-space problem.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EllipticityError, MonotonicityError, ParameterError, StepSizeError

BOUNDARY_TAG = "one-sided-linear-extrapolation"
DEFAULT_SAVES = 11
CFL_SAFETY = 0.95


@dataclass
class GridSpec:
    """Rectangular grid. ``nt`` may be ``None`` to pick the smallest stable step count."""

    x_lo: float
    x_hi: float
    nx: int
    y_lo: Optional[float] = None
    y_hi: Optional[float] = None
    ny: Optional[int] = None
    nt: Optional[int] = None
    n_saves: int = DEFAULT_SAVES

    def __post_init__(self):
        if not self.x_hi > self.x_lo or self.nx < 3:
            raise ParameterError("x box must have positive width and nx >= 3")
        if self.ny is not None and (not self.y_hi > self.y_lo or self.ny < 3):
            raise ParameterError("y box must have positive width and ny >= 3")
        if self.n_saves < 2:
            raise ParameterError("n_saves >= 2 required")

    @property
    def x(self):
        return np.linspace(self.x_lo, self.x_hi, self.nx)

    @property
    def y(self):
        return np.linspace(self.y_lo, self.y_hi, self.ny)

    def refined(self, factor):
        """Same box with ``(n - 1) * factor + 1`` nodes per axis (factor may be 1/2)."""
        def scale(n):
            return None if n is None else int(round((n - 1) * factor)) + 1
        return GridSpec(self.x_lo, self.x_hi, scale(self.nx), self.y_lo, self.y_hi, scale(self.ny), None,
                        self.n_saves)


@dataclass
class ValueField:
    """Value function on saved time slices of a rectangular grid."""

    t: np.ndarray
    x: np.ndarray
    values: np.ndarray
    y: Optional[np.ndarray] = None
    boundary: str = BOUNDARY_TAG
    metadata: dict = field(default_factory=dict)
    growth_K: float = 0.0

    def __post_init__(self):
        self.growth_K = self.fit_growth()

    def fit_growth(self):
        """Smallest K with ``|V| <= K (1 + |x|^2 + |y|^2)`` on every node, slightly relaxed."""
        w = 1.0 + self.x**2 if self.y is None else 1.0 + self.x[:, None] ** 2 + self.y[None, :] ** 2
        k = float(np.max(np.abs(self.values) / w))
        return k * (1.0 + 1e-12) + 1e-300

    def slice_at(self, t):
        i = int(np.argmin(np.abs(self.t - t)))
        if abs(self.t[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ParameterError(f"time {t!r} is not a saved slice")
        return self.values[i]

    def interpolate(self, t, x, y=None):
        """Bilinear (or linear) interpolation inside a saved slice."""
        v = self.slice_at(t)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.y is None:
            return np.interp(x, self.x, v)
        y = np.atleast_1d(np.asarray(y, dtype=float))
        ix = np.clip(np.searchsorted(self.x, x) - 1, 0, len(self.x) - 2)
        iy = np.clip(np.searchsorted(self.y, y) - 1, 0, len(self.y) - 2)
        sx = (x - self.x[ix]) / (self.x[ix + 1] - self.x[ix])
        sy = (y - self.y[iy]) / (self.y[iy + 1] - self.y[iy])
        return ((1 - sx) * (1 - sy) * v[ix, iy] + sx * (1 - sy) * v[ix + 1, iy]
                + (1 - sx) * sy * v[ix, iy + 1] + sx * sy * v[ix + 1, iy + 1])

    def to_csv(self, target=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        fmt = ".17g"
        if self.y is None:
            w.writerow(["t", "x", "V"])
            for k, tk in enumerate(self.t):
                for i, xi in enumerate(self.x):
                    w.writerow([format(tk, fmt), format(xi, fmt), format(self.values[k, i], fmt)])
        else:
            w.writerow(["t", "x", "y", "V"])
            for k, tk in enumerate(self.t):
                for i, xi in enumerate(self.x):
                    for j, yj in enumerate(self.y):
                        w.writerow([format(tk, fmt), format(xi, fmt), format(yj, fmt),
                                    format(self.values[k, i, j], fmt)])
        text = buf.getvalue()
        if target is not None:
            with open(target, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def _save_steps(nt, n_saves):
    return [int(round(k * nt / (n_saves - 1))) for k in range(n_saves)]


def _resolve_nt(T, dt_max, nt, n_saves):
    """Step count: checked against the CFL bound, or chosen as the smallest stable multiple."""
    if nt is None:
        base = n_saves - 1
        nt = int(math.ceil(T / (dt_max * CFL_SAFETY) / base)) * base
        return max(nt, base)
    if T / nt > dt_max * (1 + 1e-12):
        raise StepSizeError(f"nt={nt} violates the CFL bound; need dt <= {dt_max!r} (nt >= {math.ceil(T / dt_max)})",
                            dt_max)
    return int(nt)


# ---------------------------------------------------------------------------
# difference operators with the lateral boundary rule


def _d1(V, h, axis):
    """Forward and backward first differences; one-sided at the ends."""
    Vm = np.moveaxis(V, axis, 0)
    d = (Vm[1:] - Vm[:-1]) / h
    fwd = np.concatenate([d, d[-1:]], axis=0)
    bwd = np.concatenate([d[:1], d], axis=0)
    return np.moveaxis(fwd, 0, axis), np.moveaxis(bwd, 0, axis)


def _d2(V, h, axis):
    """Central second difference; zero at the ends (linear extrapolation)."""
    Vm = np.moveaxis(V, axis, 0)
    out = np.zeros_like(Vm)
    out[1:-1] = (Vm[2:] - 2 * Vm[1:-1] + Vm[:-2]) / (h * h)
    return np.moveaxis(out, 0, axis)


def _cross(V, dx, dy):
    """Sign-split seven-point cross differences for positive and negative coefficients.

    Returns ``(Kp, Km)``: ``c * Kp`` is monotone for c >= 0 and ``c * Km`` for
    c <= 0. Both vanish on boundary nodes.
    """
    Kp = np.zeros_like(V)
    Km = np.zeros_like(V)
    c = V[1:-1, 1:-1]
    xp, xm = V[2:, 1:-1], V[:-2, 1:-1]
    yp, ym = V[1:-1, 2:], V[1:-1, :-2]
    s = 2 * dx * dy
    Kp[1:-1, 1:-1] = (2 * c + V[2:, 2:] + V[:-2, :-2] - xp - xm - yp - ym) / s
    Km[1:-1, 1:-1] = -(2 * c + V[2:, :-2] + V[:-2, 2:] - xp - xm - yp - ym) / s
    return Kp, Km


# ---------------------------------------------------------------------------
# full two-scale HJB


def _full_tables(model, X, Y, eps):
    U = model.control_set.points
    K = len(U)
    N = X.size
    Xf = np.repeat(X.reshape(-1, 1), K, axis=0)
    Yf = np.repeat(Y.reshape(-1, 1), K, axis=0)
    Uf = np.tile(U, (N, 1))
    f = np.asarray(model.f(Xf, Yf, Uf), dtype=float)[:, 0].reshape(N, K).T
    sig = np.asarray(model.sigma_eps(eps, Xf, Yf, Uf), dtype=float)  # (N*K, 1, r)
    rho = np.asarray(model.rho(Xf, Yf), dtype=float)  # (N*K, 1, r)
    A = np.einsum("pir,pir->p", sig, sig).reshape(N, K).T
    C = (2.0 / math.sqrt(eps)) * np.einsum("pir,pir->p", sig, rho).reshape(N, K).T
    b = np.asarray(model.b(X.reshape(-1, 1), Y.reshape(-1, 1)), dtype=float)[:, 0]
    rr = np.asarray(model.rho(X.reshape(-1, 1), Y.reshape(-1, 1)), dtype=float)
    a = np.einsum("pir,pir->p", rr, rr)
    return f, A, C, b, a, (Xf, Yf, Uf)


def solve_full_hjb(model, grid: GridSpec, epsilon=None, terminal=None, check_monotone=True) -> ValueField:
    """Backward explicit monotone scheme for the epsilon-dependent HJB on an (x, y) box.

    ``terminal`` overrides ``model.g`` (a map of (N, 1) arrays). The step count
    ``grid.nt`` is checked against the CFL bound derived from coefficient
    bounds on the box, or chosen automatically when ``None``.
    """
    if model.n != 1 or model.m != 1:
        raise ParameterError("the grid solvers support n = m = 1")
    if grid.ny is None:
        raise ParameterError("the full solver needs a y grid")
    eps = model.epsilon if epsilon is None else float(epsilon)
    if not eps > 0:
        raise ParameterError("epsilon > 0 violated")
    xg, yg = grid.x, grid.y
    dx, dy = xg[1] - xg[0], yg[1] - yg[0]
    X, Y = np.meshgrid(xg, yg, indexing="ij")
    shape = X.shape
    f, A, C, b, a, flat = _full_tables(model, X, Y, eps)
    lam = model.lam
    T = model.horizon

    # monotonicity of the cross-difference stencil, per node and control
    if check_monotone and np.any(C != 0):
        lim = np.minimum(A / dx**2, (a / eps)[None, :] / dy**2)
        bad = np.abs(C) / (2 * dx * dy) > lim * (1 + 1e-12)
        if np.any(bad):
            j, q = np.argwhere(bad)[0]
            i0, i1 = np.unravel_index(q, shape)
            raise MonotonicityError(
                "cross-derivative coefficient exceeds the diagonal diffusions",
                {"x": float(xg[i0]), "y": float(yg[i1]), "control": model.control_set.points[j].tolist()},
            )

    rate = (np.abs(f) / dx + 2 * A / dx**2).max(axis=0) + np.abs(b) / (eps * dy) + 2 * a / (eps * dy**2) + lam
    dt_max = 1.0 / float(rate.max())
    nt = _resolve_nt(T, dt_max, grid.nt, grid.n_saves)
    dt = T / nt
    saves = set(_save_steps(nt, grid.n_saves))

    fp, fm = np.maximum(f, 0.0), np.minimum(f, 0.0)
    Cp, Cm = np.maximum(C, 0.0), np.minimum(C, 0.0)
    has_diff = bool(np.any(A != 0))
    has_cross = bool(np.any(C != 0))
    bp, bm = np.maximum(b, 0.0) / eps, np.minimum(b, 0.0) / eps
    a_eps = a / eps
    Xf, Yf, Uf = flat
    K = len(model.control_set.points)

    def ell_at(t):
        return np.asarray(model.ell(t, Xf, Yf, Uf), dtype=float).reshape(-1, K).T

    ell_fixed = ell_at(0.0) if model.ell_autonomous else None

    g = model.g if terminal is None else terminal
    V = np.asarray(g(X.reshape(-1, 1), Y.reshape(-1, 1)), dtype=float).reshape(shape)
    saved = {nt: V.copy()}
    # boundary nodes pointing outward make the one-sided rule non-monotone; record it
    inward = _inward_flags(f, b, shape)
    for step in range(nt, 0, -1):
        t = step * dt
        Vx_f, Vx_b = _d1(V, dx, 0)
        Vy_f, Vy_b = _d1(V, dy, 1)
        Vyy = _d2(V, dy, 1)
        vf, vb = Vx_f.ravel(), Vx_b.ravel()
        ham = fp * vf + fm * vb
        if has_diff:
            ham = ham + A * _d2(V, dx, 0).ravel()
        if has_cross:
            Kp, Km = _cross(V, dx, dy)
            ham = ham + Cp * Kp.ravel() + Cm * Km.ravel()
        ham = ham + (ell_fixed if ell_fixed is not None else ell_at(t))
        best = ham.max(axis=0)
        fast = bp * Vy_f.ravel() + bm * Vy_b.ravel() + a_eps * Vyy.ravel()
        V = V + dt * (best + fast - lam * V.ravel()).reshape(shape)
        if not np.all(np.isfinite(V)):
            raise ParameterError(f"non-finite values at t={t - dt!r}")
        if step - 1 in saves:
            saved[step - 1] = V.copy()
    order = sorted(saved)
    meta = {"epsilon": eps, "dt": dt, "nt": nt, "dt_max": dt_max, "inward_drift_on_boundary": inward,
            "nx": grid.nx, "ny": grid.ny}
    return ValueField(np.array(order) * dt, xg, np.stack([saved[k] for k in order]), yg, BOUNDARY_TAG, meta)


def _inward_flags(f, b, shape):
    fx = f.reshape(f.shape[0], *shape)
    bb = b.reshape(shape)
    return bool(np.all(fx[:, 0, :] >= 0) and np.all(fx[:, -1, :] <= 0)
                and np.all(bb[:, 0] >= 0) and np.all(bb[:, -1] <= 0))


# ---------------------------------------------------------------------------
# effective HJB


def probe_ellipticity(H_nodes, nx, t=0.0, rounds=8, seed=0, p_scale=5.0, P_scale=5.0, tol=1e-10):
    """Check that ``H_nodes(t, p, P)`` (arrays over the grid) is nonincreasing in P on random arguments."""
    rng = np.random.default_rng(seed)
    for _ in range(rounds):
        p = rng.uniform(-p_scale, p_scale, nx)
        P = rng.uniform(-P_scale, P_scale, nx)
        dP = rng.uniform(0.01, 1.0, nx) * P_scale
        h0 = np.asarray(H_nodes(t, p, P), dtype=float)
        h1 = np.asarray(H_nodes(t, p, P + dP), dtype=float)
        bad = h1 > h0 + tol * (1 + np.abs(h0))
        if np.any(bad):
            i = int(np.argmax(bad))
            raise EllipticityError(f"Hbar increases in P at node {i}, p={p[i]!r}, P={P[i]!r}")


def _probe_bounds(H_nodes, nx, t=0.0, rounds=8, p_scale=10.0, P_scale=10.0, h=1e-4, seed=1):
    """Estimate sup |dH/dp| and sup |dH/dP| by central differences on random arguments."""
    rng = np.random.default_rng(seed)
    bp = bP = 0.0
    for _ in range(rounds):
        p = rng.uniform(-p_scale, p_scale, nx)
        P = rng.uniform(-P_scale, P_scale, nx)
        dHp = (np.asarray(H_nodes(t, p + h, P)) - np.asarray(H_nodes(t, p - h, P))) / (2 * h)
        dHP = (np.asarray(H_nodes(t, p, P + h)) - np.asarray(H_nodes(t, p, P - h))) / (2 * h)
        bp = max(bp, float(np.max(np.abs(dHp))))
        bP = max(bP, float(np.max(np.abs(dHP))))
    return 1.1 * bp, 1.1 * bP


class _GridEvaluator:
    """Adapter giving grid-bound and free-standing effective Hamiltonians one interface."""

    def __init__(self, effective_h, x):
        self.x = x
        self.inner = effective_h
        self.on_grid = hasattr(effective_h, "x_grid")
        if self.on_grid and (len(effective_h.x_grid) != len(x) or np.max(np.abs(effective_h.x_grid - x)) > 1e-12):
            raise ParameterError("effective Hamiltonian was built on a different x grid")
        p_b = getattr(effective_h, "p_bound", None)
        P_b = getattr(effective_h, "P_bound", None)
        if p_b is None or P_b is None:
            pb, Pb = _probe_bounds(self.on_nodes, len(x))
            p_b = pb if p_b is None else p_b
            P_b = Pb if P_b is None else P_b
        self.p_bound = float(p_b)
        self.P_bound = float(P_b)

    def on_nodes(self, t, p, P):
        if self.on_grid:
            return np.asarray(self.inner(t, p, P), dtype=float)
        return np.asarray(self.inner(t, self.x, p, P), dtype=float) + np.zeros(len(self.x))


def solve_effective_hjb(effective_h, terminal, grid: GridSpec, horizon, lam=0.0, tables=None,
                        check_ellipticity=True) -> ValueField:
    """Backward explicit monotone scheme for the effective Cauchy problem.

    Parameters
    ----------
    effective_h : evaluator or None
        Either an :class:`~twoscale.homogenize.EffectiveHamiltonian` built on
        ``grid.x`` or a vectorized callable ``H(t, x, p, P)``. Optional
        ``p_bound``/``P_bound`` attributes bound its sensitivities; otherwise
        they are probed. A Lax-Friedrichs numerical Hamiltonian is used.
    terminal : callable or array
        Effective terminal data on ``grid.x``.
    tables : callable, optional
        ``tables(t) -> (fbar, Sbar, ellbar)`` arrays of shape (nx, K) for the
        Bellman form; replaces ``effective_h``.
    """
    xg = grid.x
    dx = xg[1] - xg[0]
    T = float(horizon)
    if not T > 0:
        raise ParameterError("horizon > 0 violated")
    if lam < 0:
        raise ParameterError("lambda >= 0 violated")
    g = np.asarray(terminal(xg[:, None]) if callable(terminal) else terminal, dtype=float).reshape(-1)
    if g.shape != xg.shape:
        raise ParameterError("terminal data must match the x grid")

    if tables is not None:
        f0, S0, _ = tables(0.0)
        if np.any(S0 < 0):
            raise EllipticityError("averaged diffusion must be nonnegative")
        rate = (np.abs(f0) / dx + 2 * S0 / dx**2).max() + lam
        mode = "bellman_table"
    else:
        ev = _GridEvaluator(effective_h, xg)
        if check_ellipticity:
            probe_ellipticity(ev.on_nodes, len(xg))
        theta = ev.p_bound
        rate = theta / dx + 2 * ev.P_bound / dx**2 + lam
        mode = "lax_friedrichs"
    dt_max = 1.0 / max(float(rate), 1e-300)
    nt = _resolve_nt(T, dt_max, grid.nt, grid.n_saves)
    dt = T / nt
    saves = set(_save_steps(nt, grid.n_saves))
    V = g.copy()
    saved = {nt: V.copy()}
    for step in range(nt, 0, -1):
        t = step * dt
        Vf, Vb = _d1(V, dx, 0)
        Vxx = _d2(V, dx, 0)
        if mode == "bellman_table":
            fb, Sb, lb = tables(t)
            ham = np.maximum(fb, 0) * Vf[:, None] + np.minimum(fb, 0) * Vb[:, None] + Sb * Vxx[:, None] + lb
            V = V + dt * (ham.max(axis=1) - lam * V)
        else:
            Hn = ev.on_nodes(t, 0.5 * (Vf + Vb), Vxx) - 0.5 * theta * (Vf - Vb)
            V = V - dt * (Hn + lam * V)
        if not np.all(np.isfinite(V)):
            raise ParameterError(f"non-finite values at t={t - dt!r}")
        if step - 1 in saves:
            saved[step - 1] = V.copy()
    order = sorted(saved)
    meta = {"mode": mode, "dt": dt, "nt": nt, "dt_max": dt_max, "nx": grid.nx}
    return ValueField(np.array(order) * dt, xg, np.stack([saved[k] for k in order]), None, BOUNDARY_TAG, meta)


# ---------------------------------------------------------------------------
# convergence study


@dataclass
class ProbeBox:
    """Fractions of each axis and of the horizon defining the compact reporting region."""

    lo: float = 0.25
    hi: float = 0.75
    t_hi: float = 0.9

    def mask(self, grid_axis):
        a, b = grid_axis[0], grid_axis[-1]
        lo = a + self.lo * (b - a)
        hi = a + self.hi * (b - a)
        return (grid_axis >= lo - 1e-12) & (grid_axis <= hi + 1e-12)


def _slice_values(full: ValueField, y_star):
    """``V^eps(t, x, y*(x))`` on every saved slice by linear interpolation in y."""
    out = np.empty((len(full.t), len(full.x)))
    for i in range(len(full.x)):
        for k in range(len(full.t)):
            out[k, i] = np.interp(y_star[i], full.y, full.values[k, i])
    return out


def gap_metrics(full: ValueField, eff: ValueField, y_star, probe: ProbeBox, y_probe=None):
    """Sup gap to the effective solution on the probe box, and the y-spread at mid horizon."""
    if len(full.x) != len(eff.x) or np.max(np.abs(full.x - eff.x)) > 1e-12:
        raise ParameterError("full and effective solves must share the x grid")
    if len(full.t) != len(eff.t) or np.max(np.abs(full.t - eff.t)) > 1e-9:
        raise ParameterError("full and effective solves must share the saved times")
    T = full.t[-1]
    tm = full.t <= probe.t_hi * T + 1e-12
    xm = probe.mask(full.x)
    ym = probe.mask(full.y) if y_probe is None else y_probe
    vs = _slice_values(full, y_star)
    gap = float(np.max(np.abs(vs - eff.values)[np.ix_(tm, xm)]))
    k_mid = int(np.argmin(np.abs(full.t - 0.5 * T)))
    mid = full.values[k_mid][np.ix_(xm, ym)]
    spread = float(np.max(mid.max(axis=1) - mid.min(axis=1)))
    return gap, spread


def convergence_study(model, epsilon_list, grid: GridSpec, effective_h, effective_terminal, y_star,
                      probe: Optional[ProbeBox] = None, coarse_effective=None, grid_error_grid=None):
    """Gap between full solutions and the effective solution as epsilon decreases.

    ``y_star`` maps x nodes to the fast slice used for the gap. ``coarse_effective``
    is a ``(effective_h, terminal)`` pair built on ``grid_error_grid``; when both
    are given, the grid error at the smallest epsilon is estimated as the probe-box
    difference between the two resolutions (full plus effective).
    """
    eps = [float(e) for e in epsilon_list]
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ParameterError("epsilon_list must be strictly decreasing")
    probe = probe or ProbeBox()
    eff = solve_effective_hjb(effective_h, effective_terminal, grid, model.horizon, model.lam)
    nt_eff = eff.metadata["nt"]
    gaps, spreads, runs = [], [], []
    ys = y_star(grid.x)
    for e in eps:
        full = solve_full_hjb(model, grid, e)
        gap, spread = gap_metrics(full, eff, ys, probe)
        gaps.append(gap)
        spreads.append(spread)
        runs.append({"epsilon": e, "nt": full.metadata["nt"], "inward": full.metadata["inward_drift_on_boundary"]})
    grid_error = None
    if coarse_effective is not None and grid_error_grid is not None:
        grid_error = _grid_error(model, eps[-1], grid, grid_error_grid, full, eff, coarse_effective, probe)
    decreasing = all(b < a for a, b in zip(gaps, gaps[1:]))
    spread_dec = all(b < a for a, b in zip(spreads, spreads[1:]))
    within = grid_error is None or gaps[-1] <= 3.0 * grid_error
    return {
        "epsilons": eps,
        "gaps": gaps,
        "spreads": spreads,
        "grid_error": grid_error,
        "verdict": bool(decreasing and spread_dec and within),
        "gap_decreasing": decreasing,
        "spread_decreasing": spread_dec,
        "final_gap_within_grid_error": within,
        "effective_nt": nt_eff,
        "runs": runs,
    }


def _grid_error(model, eps, grid, other_grid, full, eff, coarse_effective, probe):
    """Probe-box difference between two resolutions, on the nodes they share."""
    full2 = solve_full_hjb(model, other_grid, eps)
    h2, g2 = coarse_effective
    eff2 = solve_effective_hjb(h2, g2, other_grid, model.horizon, model.lam)
    # compare on the coarser of the two node sets
    if len(other_grid.x) <= len(grid.x):
        coarse_x, fine_x = other_grid.x, grid.x
        c_full, f_full, c_eff, f_eff = full2, full, eff2, eff
    else:
        coarse_x, fine_x = grid.x, other_grid.x
        c_full, f_full, c_eff, f_eff = full, full2, eff, eff2
    step = (len(fine_x) - 1) // (len(coarse_x) - 1)
    T = full.t[-1]
    tm = full.t <= probe.t_hi * T + 1e-12
    xm = probe.mask(coarse_x)
    ym = probe.mask(c_full.y)
    d_full = np.abs(c_full.values[:, :, :] - f_full.values[:, ::step, ::step])[np.ix_(tm, xm, ym)].max()
    d_eff = np.abs(c_eff.values - f_eff.values[:, ::step])[np.ix_(tm, xm)].max()
    return float(d_full + d_eff)
