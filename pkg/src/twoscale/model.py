"""Two-scale model data types, benchmark factories and assumption probes.

Coefficient maps are batched: every map accepts arrays whose trailing axis is the
state (or control) dimension and whose leading axes broadcast together::

    f(x, y, u)            -> (..., n)
    sigma_eps(eps, x, y, u) -> (..., n, r)
    sigma_limit(x, y, u)  -> (..., n, r)
    b(x, y)               -> (..., m)
    rho(x, y)             -> (..., m, r)
    ell(t, x, y, u)       -> (...)
    g(x, y)               -> (...)
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ParameterError

BENCHMARKS = ("ou", "lq_deep_relax", "drift_free", "custom_1d")
DEFAULT_CONTROL_POINTS = 33


def _bshape(*arrays):
    shapes = [np.shape(a)[:-1] for a in arrays]
    if all(sh == shapes[0] for sh in shapes):
        return shapes[0]
    return np.broadcast_shapes(*shapes)


def _fit(val, lead, tail=()):
    """Broadcast ``val`` to ``lead + tail`` only when needed."""
    shape = tuple(lead) + tuple(tail)
    if np.shape(val) == shape:
        return val
    return val + np.zeros(shape)


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Finite grid of control points inside a bounding box."""

    points: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if pts.shape[0] == 0:
            raise ParameterError("control set must be nonempty")
        if pts.shape[1] != lo.size or lo.size != hi.size:
            raise ParameterError("control points and bounding box disagree in dimension")
        if np.any(pts < lo) or np.any(pts > hi):
            raise ParameterError("control points must lie in the bounding box")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def box(cls, lower, upper, n_per_axis=DEFAULT_CONTROL_POINTS):
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        axes = [np.linspace(a, b, n_per_axis) if b > a else np.array([a]) for a, b in zip(lo, hi)]
        pts = np.array(list(itertools.product(*axes)), dtype=float)
        return cls(pts, lo, hi)

    @classmethod
    def singleton(cls, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls(u[None, :], u, u)

    @property
    def k(self):
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class TwoScaleModel:
    """Coefficient bundle of a singularly perturbed controlled diffusion."""

    n: int
    m: int
    r: int
    f: Callable
    sigma_eps: Callable
    sigma_limit: Callable
    b: Callable
    rho: Callable
    ell: Callable
    g: Callable
    lam: float
    control_set: ControlSet
    epsilon: float
    horizon: float
    name: str = "custom"
    params: dict = field(default_factory=dict)
    # log of the unnormalised invariant density of the frozen fast process, if known
    fast_log_density: Optional[Callable] = None
    ell_autonomous: bool = False
    # rho does not depend on the state; lets simulators precompute noise increments
    rho_constant: bool = False

    def __post_init__(self):
        for dim in ("n", "m", "r"):
            if int(getattr(self, dim)) < 1:
                raise ParameterError(f"{dim} must be a positive integer")
        if not self.lam >= 0:
            raise ParameterError("lambda >= 0 violated")
        if not self.epsilon > 0:
            raise ParameterError("epsilon > 0 violated")
        if not self.horizon > 0:
            raise ParameterError("horizon > 0 violated")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def constant_rho(self):
        """The (m, r) fast diffusion matrix when declared state independent, else None."""
        if not self.rho_constant:
            return None
        return np.asarray(self.rho(np.zeros((1, self.n)), np.zeros((1, self.m))), dtype=float)[0]


# ---------------------------------------------------------------------------
# benchmark factories

_COMMON = {
    "epsilon": 0.1,
    "horizon": 1.0,
    "lam": 0.0,
    "n_controls": DEFAULT_CONTROL_POINTS,
    "u_lo": 0.0,
    "u_hi": 0.0,
    # terminal reward g = g0 + gx*sum(x) + gxx*|x|^2 + gy*sum(y) + gyy*|y|^2
    "g0": 0.0,
    "gx": 0.0,
    "gxx": 0.0,
    "gy": 0.0,
    "gyy": 0.0,
    # running reward l = l0 + lx*sum(x) + lxx*|x|^2 + ly*sum(y) + lyy*|y|^2 + lu*sum(u) + luu*|u|^2
    "l0": 0.0,
    "lx": 0.0,
    "lxx": 0.0,
    "ly": 0.0,
    "lyy": 0.0,
    "lu": 0.0,
    "luu": 0.0,
}

_SLOW_LINEAR = {"f0": 0.0, "fx": 0.0, "fy": 0.0, "fu": 0.0, "s0": 0.0}

_SPECIFIC = {
    "ou": {"kappa": 1.0, "mean": 0.0, "rho_bar": 1.0, "m": 1, **_SLOW_LINEAR},
    "lq_deep_relax": {"q": 1.0, "gamma": 0.5, "beta": 1.0, "u_lo": 0.0, "u_hi": 1.0, "gxx": -1.0},
    "drift_free": {"rho_bar": 1.0, "m": 1, **_SLOW_LINEAR},
    "custom_1d": {"b0": 0.0, "bx": 0.0, "by": -1.0, "rho0": 1.0, "r": 1, **_SLOW_LINEAR},
}

_INT_KEYS = {"n_controls", "m", "r"}


def benchmark_defaults(name):
    if name not in BENCHMARKS:
        raise ParameterError(f"unknown benchmark {name!r}; valid: {', '.join(BENCHMARKS)}")
    out = dict(_COMMON)
    out.update(_SPECIFIC[name])
    return out


def _resolve_params(name, params):
    merged = benchmark_defaults(name)
    for key, value in (params or {}).items():
        if key not in merged:
            raise ParameterError(f"unknown parameter {key!r} for benchmark {name!r}")
        try:
            merged[key] = int(value) if key in _INT_KEYS else float(value)
        except (TypeError, ValueError):
            raise ParameterError(f"parameter {key!r}: expected a number, got {value!r}") from None
    for key in _INT_KEYS & merged.keys():
        merged[key] = int(merged[key])
    return merged


def _quadratic_terminal(p):
    g0, gx, gxx, gy, gyy = p["g0"], p["gx"], p["gxx"], p["gy"], p["gyy"]

    def g(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        val = (
            g0
            + gx * x.sum(-1)
            + gxx * (x * x).sum(-1)
            + gy * y.sum(-1)
            + gyy * (y * y).sum(-1)
        )
        return _fit(val, _bshape(x, y))

    return g


def _quadratic_running(p):
    c = [p[k] for k in ("l0", "lx", "lxx", "ly", "lyy", "lu", "luu")]

    def ell(t, x, y, u):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        u = np.asarray(u, dtype=float)
        val = (
            c[0]
            + c[1] * x.sum(-1)
            + c[2] * (x * x).sum(-1)
            + c[3] * y.sum(-1)
            + c[4] * (y * y).sum(-1)
            + c[5] * u.sum(-1)
            + c[6] * (u * u).sum(-1)
        )
        return _fit(val, _bshape(x, y, u))

    return ell


def _controls(p):
    if p["u_hi"] < p["u_lo"]:
        raise ParameterError("u_lo <= u_hi violated")
    if p["u_hi"] == p["u_lo"]:
        return ControlSet.singleton([p["u_lo"]])
    if p["n_controls"] < 2:
        raise ParameterError("n_controls >= 2 violated")
    return ControlSet.box([p["u_lo"]], [p["u_hi"]], p["n_controls"])


def _linear_slow(p, r, noise_col=0):
    """Scalar slow block f = f0 + fx x + fy y + fu u, sigma = s0 on one noise column."""
    f0, fx, fy, fu, s0 = p["f0"], p["fx"], p["fy"], p["fu"], p["s0"]

    def f(x, y, u):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        u = np.asarray(u, dtype=float)
        val = f0 + fx * x[..., :1] + fy * y[..., :1] + fu * u[..., :1]
        return _fit(val, _bshape(x, y, u), (1,))

    def sigma_limit(x, y, u):
        out = np.zeros(_bshape(np.asarray(x), np.asarray(y), np.asarray(u)) + (1, r))
        out[..., 0, noise_col] = s0
        return out

    def sigma_eps(eps, x, y, u):
        return sigma_limit(x, y, u)

    return f, sigma_eps, sigma_limit


def _make_ou(p):
    kappa, mean, rho_bar, m = p["kappa"], p["mean"], p["rho_bar"], p["m"]
    if kappa <= 0:
        raise ParameterError("kappa > 0 violated")
    if rho_bar <= 0:
        raise ParameterError("rho_bar > 0 violated")
    if m < 1:
        raise ParameterError("m >= 1 violated")
    scale = np.sqrt(rho_bar)
    eye = scale * np.eye(m)
    f, sigma_eps, sigma_limit = _linear_slow(p, m)

    def b(x, y):
        y = np.asarray(y, dtype=float)
        return _fit(-kappa * (y - mean), _bshape(np.asarray(x), y), (m,))

    def rho(x, y):
        shape = _bshape(np.asarray(x), np.asarray(y))
        return np.broadcast_to(eye, shape + (m, m)).copy()

    def log_density(x, y):
        y = np.asarray(y, dtype=float)
        return _fit(-kappa * ((y - mean) ** 2).sum(-1) / (2.0 * rho_bar), _bshape(np.asarray(x), y))

    return dict(n=1, m=m, r=m, f=f, sigma_eps=sigma_eps, sigma_limit=sigma_limit, b=b, rho=rho,
                fast_log_density=log_density)


def _make_lq_deep_relax(p):
    q, gamma, beta = p["q"], p["gamma"], p["beta"]
    if gamma <= 0 or beta <= 0:
        raise ParameterError("gamma > 0 and beta > 0 violated")
    if not q * gamma < 1:
        raise ParameterError("q*gamma<1 violated")
    if q < 0:
        raise ParameterError("q >= 0 violated")
    if p["u_lo"] < 0 or p["u_hi"] > 1:
        raise ParameterError("learning rate must lie in [0, 1]")
    stiff = q + 1.0 / gamma
    scale = beta ** -0.5

    def f(x, y, u):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        u = np.asarray(u, dtype=float)
        return _fit(-u[..., :1] * (x - y) / gamma, _bshape(x, y, u), (1,))

    def sigma_limit(x, y, u):
        return np.zeros(_bshape(np.asarray(x), np.asarray(y), np.asarray(u)) + (1, 1))

    def sigma_eps(eps, x, y, u):
        return sigma_limit(x, y, u)

    def b(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return _fit(-stiff * y + x / gamma, _bshape(x, y), (1,))

    def rho(x, y):
        return np.full(_bshape(np.asarray(x), np.asarray(y)) + (1, 1), scale)

    def log_density(x, y):
        # -beta * Phi(y, x) with Phi = q y^2 / 2 + (x - y)^2 / (2 gamma)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        phi = 0.5 * q * y[..., 0] ** 2 + (x[..., 0] - y[..., 0]) ** 2 / (2.0 * gamma)
        return -beta * phi

    return dict(n=1, m=1, r=1, f=f, sigma_eps=sigma_eps, sigma_limit=sigma_limit, b=b, rho=rho,
                fast_log_density=log_density)


def _make_drift_free(p):
    rho_bar, m = p["rho_bar"], p["m"]
    if rho_bar <= 0:
        raise ParameterError("rho_bar > 0 violated")
    scale = np.sqrt(rho_bar)
    eye = scale * np.eye(m)
    f, sigma_eps, sigma_limit = _linear_slow(p, m)

    def b(x, y):
        return np.zeros(_bshape(np.asarray(x), np.asarray(y)) + (m,))

    def rho(x, y):
        shape = _bshape(np.asarray(x), np.asarray(y))
        return np.broadcast_to(eye, shape + (m, m)).copy()

    return dict(n=1, m=m, r=m, f=f, sigma_eps=sigma_eps, sigma_limit=sigma_limit, b=b, rho=rho)


def _make_custom_1d(p):
    b0, bx, by, rho0, r = p["b0"], p["bx"], p["by"], p["rho0"], p["r"]
    if r not in (1, 2):
        raise ParameterError("r must be 1 (shared noise) or 2 (independent noise)")
    # with r == 2 the slow block uses column 0 and the fast block column 1
    fast_col = 0 if r == 1 else 1
    f, sigma_eps, sigma_limit = _linear_slow(p, r, noise_col=0)

    def b(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return _fit(b0 + bx * x[..., :1] + by * y[..., :1], _bshape(x, y), (1,))

    def rho(x, y):
        out = np.zeros(_bshape(np.asarray(x), np.asarray(y)) + (1, r))
        out[..., 0, fast_col] = rho0
        return out

    log_density = None
    if by < 0 and rho0 != 0:
        a = rho0 * rho0

        def log_density(x, y):
            x = np.asarray(x, dtype=float)
            y = np.asarray(y, dtype=float)
            lin = b0 + bx * x[..., 0]
            return (lin * y[..., 0] + 0.5 * by * y[..., 0] ** 2) / a

    return dict(n=1, m=1, r=r, f=f, sigma_eps=sigma_eps, sigma_limit=sigma_limit, b=b, rho=rho,
                fast_log_density=log_density)


_FACTORIES = {
    "ou": _make_ou,
    "lq_deep_relax": _make_lq_deep_relax,
    "drift_free": _make_drift_free,
    "custom_1d": _make_custom_1d,
}


def make_benchmark(name, params=None):
    """Build one of the named analytic benchmark models.

    ``params`` overrides the defaults returned by :func:`benchmark_defaults`.
    Reward keys (``g0``, ``gxx``, ``lyy``...) define quadratic terminal and
    running rewards; ``u_lo``/``u_hi``/``n_controls`` define the control grid.
    """
    p = _resolve_params(name, params)
    if p["epsilon"] <= 0:
        raise ParameterError("epsilon > 0 violated")
    if p["horizon"] <= 0:
        raise ParameterError("horizon > 0 violated")
    if p["lam"] < 0:
        raise ParameterError("lam >= 0 violated")
    parts = _FACTORIES[name](p)
    return TwoScaleModel(
        g=_quadratic_terminal(p),
        ell=_quadratic_running(p),
        lam=p["lam"],
        control_set=_controls(p),
        epsilon=p["epsilon"],
        horizon=p["horizon"],
        name=name,
        params=p,
        ell_autonomous=True,
        rho_constant=True,
        **parts,
    )


# ---------------------------------------------------------------------------
# assumption probes


@dataclass(frozen=True, eq=False)
class Box:
    """Rectangular sample domain in (x, y) space."""

    x_lo: np.ndarray
    x_hi: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray

    def __post_init__(self):
        for name in ("x_lo", "x_hi", "y_lo", "y_hi"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    @classmethod
    def symmetric(cls, x_half, y_half, n=1, m=1):
        return cls(-np.full(n, x_half), np.full(n, x_half), -np.full(m, y_half), np.full(m, y_half))

    def describe(self):
        return {
            "x_lo": self.x_lo.tolist(),
            "x_hi": self.x_hi.tolist(),
            "y_lo": self.y_lo.tolist(),
            "y_hi": self.y_hi.tolist(),
        }


@dataclass
class AssumptionVerdict:
    assumption: str
    verdict: str  # satisfied | violated | inconclusive
    margin: float
    witness: Optional[dict] = None
    note: str = ""


@dataclass
class AssumptionReport:
    box: dict
    verdicts: dict
    constants: dict
    tol: float

    def verdict(self, assumption):
        return self.verdicts[assumption].verdict

    def to_dict(self):
        return {
            "box": self.box,
            "tol": self.tol,
            "constants": self.constants,
            "verdicts": {k: dataclasses.asdict(v) for k, v in self.verdicts.items()},
        }


_SLACK = 0.01


def _grid(lo, hi, density):
    axes = [np.linspace(a, b, density) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in mesh], axis=-1)


def _witness(x, y, u=None, t=None):
    out = {"x": np.asarray(x).tolist(), "y": np.asarray(y).tolist()}
    if u is not None:
        out["u"] = np.asarray(u).tolist()
    if t is not None:
        out["t"] = float(t)
    return out


def _sample_points(model, box, grid_density):
    xs = _grid(box.x_lo, box.x_hi, grid_density)
    ys = _grid(box.y_lo, box.y_hi, grid_density)
    X = np.repeat(xs, len(ys), axis=0)
    Y = np.tile(ys, (len(xs), 1))
    return X, Y


def validate_assumptions(model, box, grid_density=21, tol=1e-9, n_pairs=10_000, seed=0,
                         recurrence_radius_floor=1.0):
    """Probe the standing assumptions on a finite grid over ``box``.

    Every verdict is "satisfied on the probed box" at best. Fitted constants are
    the extreme sample values relaxed by a 1% slack. The recurrence radius R is
    the smallest sampled radius (not below ``recurrence_radius_floor``) beyond
    which ``-b.y/|y|`` stays positive; A is the minimum of that ratio there.
    """
    if grid_density < 2:
        raise ParameterError("grid_density >= 2 per axis required")
    if np.any(box.x_hi <= box.x_lo) or np.any(box.y_hi <= box.y_lo):
        raise ParameterError("box must have positive volume")
    if box.x_lo.size != model.n or box.y_lo.size != model.m:
        raise ParameterError("box dimensions do not match the model")

    X, Y = _sample_points(model, box, grid_density)
    U = model.control_set.points
    nu = len(U)
    Xu = np.repeat(X, nu, axis=0)
    Yu = np.repeat(Y, nu, axis=0)
    Uu = np.tile(U, (len(X), 1))
    times = np.linspace(0.0, model.horizon, max(2, min(grid_density, 5)))
    verdicts = {}
    constants = {}

    f = np.asarray(model.f(Xu, Yu, Uu), dtype=float)
    sig = np.asarray(model.sigma_eps(model.epsilon, Xu, Yu, Uu), dtype=float)
    b = np.asarray(model.b(X, Y), dtype=float)
    rho = np.asarray(model.rho(X, Y), dtype=float)
    g = np.asarray(model.g(X, Y), dtype=float)
    ell = np.stack([np.asarray(model.ell(t, Xu, Yu, Uu), dtype=float) for t in times])

    arrays = {"f": (f, Xu, Yu), "sigma_eps": (sig, Xu, Yu), "b": (b, X, Y), "rho": (rho, X, Y),
              "g": (g, X, Y)}
    bad = None
    for key, (arr, xa, ya) in arrays.items():
        flat = arr.reshape(arr.shape[0], -1)
        nonfinite = ~np.all(np.isfinite(flat), axis=1)
        if np.any(nonfinite):
            i = int(np.argmax(nonfinite))
            bad = (key, _witness(xa[i], ya[i]))
            break
    if bad is None and not np.all(np.isfinite(ell)):
        i = int(np.argmax(~np.isfinite(ell).reshape(-1)))
        bad = ("ell", _witness(Xu[i % len(Xu)], Yu[i % len(Yu)]))
    if bad is not None:
        key, wit = bad
        v = AssumptionVerdict("finite", "violated", float("-inf"), wit, f"{key} returned a non-finite value")
        return AssumptionReport(box.describe(), {"finite": v}, {}, tol)

    # A1: linear growth of f, sigma, b, rho
    growth_u = 1.0 + np.linalg.norm(Xu, axis=1) + np.linalg.norm(Yu, axis=1)
    growth = 1.0 + np.linalg.norm(X, axis=1) + np.linalg.norm(Y, axis=1)
    ratios = np.concatenate([
        np.linalg.norm(f, axis=1) / growth_u,
        np.linalg.norm(sig.reshape(len(sig), -1), axis=1) / growth_u,
        np.linalg.norm(b, axis=1) / growth,
        np.linalg.norm(rho.reshape(len(rho), -1), axis=1) / growth,
    ])
    c_lin = float(ratios.max()) * (1 + _SLACK) + tol
    constants["C"] = c_lin
    # a ratio still climbing at the outer shell hints at superlinear growth
    radius_u = np.maximum(np.max(np.abs(Xu) / np.maximum(np.abs(box.x_hi), np.abs(box.x_lo)), axis=1),
                          np.max(np.abs(Yu) / np.maximum(np.abs(box.y_hi), np.abs(box.y_lo)), axis=1))
    radius = np.maximum(np.max(np.abs(X) / np.maximum(np.abs(box.x_hi), np.abs(box.x_lo)), axis=1),
                        np.max(np.abs(Y) / np.maximum(np.abs(box.y_hi), np.abs(box.y_lo)), axis=1))
    radii = np.concatenate([radius_u, radius_u, radius, radius])
    inner = ratios[radii <= 0.5]
    outer = ratios[radii > 0.5]
    trend = "inconclusive" if inner.size and outer.max() > 1.5 * max(inner.max(), tol) and outer.max() > 1.0 else "satisfied"
    verdicts["A1"] = AssumptionVerdict("A1", trend, c_lin - float(ratios.max()), None,
                                       "growth ratio rises toward the box boundary" if trend != "satisfied" else "")

    # A3: uniform ellipticity of rho rho^T
    a = rho @ np.swapaxes(rho, -1, -2)
    eig = np.linalg.eigvalsh(a)
    lo_i = int(np.argmin(eig[:, 0]))
    lam_lo, lam_hi = float(eig[:, 0].min()), float(eig[:, -1].max())
    constants["Lambda_lower"] = lam_lo * (1 - _SLACK)
    constants["Lambda_upper"] = lam_hi * (1 + _SLACK) + tol
    if lam_lo > tol:
        verdicts["A3"] = AssumptionVerdict("A3", "satisfied", lam_lo)
    else:
        verdicts["A3"] = AssumptionVerdict("A3", "violated", lam_lo, _witness(X[lo_i], Y[lo_i]),
                                           "rho rho^T degenerate")

    # A4: recurrence b.y < -A|y| for |y| >= R, checked per frozen x
    ynorm = np.linalg.norm(Y, axis=1)
    bdoty = np.einsum("ij,ij->i", b, Y)
    A_fit, R_fit = [], []
    a4 = None
    xs_unique = _grid(box.x_lo, box.x_hi, grid_density)
    per_x = len(Y) // len(xs_unique)
    for j in range(len(xs_unique)):
        sl = slice(j * per_x, (j + 1) * per_x)
        yn, bd = ynorm[sl], bdoty[sl]
        s = np.where(yn > 0, -bd / np.where(yn > 0, yn, 1.0), np.inf)
        order = np.argsort(yn)
        yn_s, s_s = yn[order], s[order]
        # suffix minimum of s over radii >= yn_s[i]
        suffix = np.minimum.accumulate(s_s[::-1])[::-1]
        ok = (suffix > tol) & (yn_s >= min(recurrence_radius_floor, yn_s.max()))
        if not np.any(ok):
            i = int(np.argmax(yn))
            wit = _witness(X[sl][i], Y[sl][i])
            a4 = AssumptionVerdict("A4", "violated", float(s.min() if np.isfinite(s.min()) else -np.inf), wit,
                                   "no radius beyond which b.y < -A|y| holds on the box")
            break
        i0 = int(np.argmax(ok))
        R_fit.append(float(yn_s[i0]))
        A_fit.append(float(suffix[i0]))
    if a4 is None:
        A = min(A_fit) * (1 - _SLACK)
        R = max(R_fit) * (1 + _SLACK)
        constants["A"] = A
        constants["R"] = R
        a4 = AssumptionVerdict("A4", "satisfied", A)
    verdicts["A4"] = a4

    # C1: constant isotropic fast diffusion
    rho_bar = float(np.mean(np.trace(a, axis1=-2, axis2=-1)) / model.m)
    dev = np.abs(a - rho_bar * np.eye(model.m)).reshape(len(a), -1).max(axis=1)
    i = int(np.argmax(dev))
    if dev[i] <= max(tol, 1e-12 * abs(rho_bar)) and rho_bar > 0:
        constants["rho_bar"] = rho_bar
        verdicts["C1"] = AssumptionVerdict("C1", "satisfied", -float(dev[i]))
    else:
        verdicts["C1"] = AssumptionVerdict("C1", "violated", -float(dev[i]), _witness(X[i], Y[i]),
                                           "rho rho^T is not a constant multiple of the identity")

    # C2: strong recurrence (b(x,y1)-b(x,y2)).(y1-y2) <= -kappa |y1-y2|^2 on random pairs
    rng = np.random.default_rng(seed)
    xp = rng.uniform(box.x_lo, box.x_hi, size=(n_pairs, model.n))
    y1 = rng.uniform(box.y_lo, box.y_hi, size=(n_pairs, model.m))
    y2 = rng.uniform(box.y_lo, box.y_hi, size=(n_pairs, model.m))
    dy = y1 - y2
    db = np.asarray(model.b(xp, y1)) - np.asarray(model.b(xp, y2))
    d2 = np.einsum("ij,ij->i", dy, dy)
    keep = d2 > 1e-12
    kap = -np.einsum("ij,ij->i", db, dy)[keep] / d2[keep]
    i = int(np.argmin(kap))
    k_min = float(kap[i])
    if k_min > tol:
        constants["kappa"] = k_min * (1 - _SLACK)
        verdicts["C2"] = AssumptionVerdict("C2", "satisfied", k_min)
    else:
        idx = np.flatnonzero(keep)[i]
        verdicts["C2"] = AssumptionVerdict("C2", "violated", k_min,
                                           {"x": xp[idx].tolist(), "y1": y1[idx].tolist(), "y2": y2[idx].tolist()},
                                           "drift is not strongly dissipative")

    # B2: quadratic growth of g and ell
    q_u = 1.0 + (Xu**2).sum(1) + (Yu**2).sum(1)
    q = 1.0 + (X**2).sum(1) + (Y**2).sum(1)
    k_ratio = max(float((np.abs(g) / q).max()), float((np.abs(ell) / q_u[None, :]).max()))
    constants["K"] = k_ratio * (1 + _SLACK) + tol
    verdicts["B2"] = AssumptionVerdict("B2", "satisfied", constants["K"] - k_ratio)

    # D: sigma sigma^T independent of (y, u), or b independent of x
    ss = sig @ np.swapaxes(sig, -1, -2)
    ss_by_x = ss.reshape(len(xs_unique), -1, model.n, model.n)
    d_a = bool(np.all(np.abs(ss_by_x - ss_by_x[:, :1]) <= tol))
    b_by_x = b.reshape(len(xs_unique), per_x, model.m)
    d_b = bool(np.all(np.abs(b_by_x - b_by_x[:1]) <= tol))
    constants["D_a"] = d_a
    constants["D_b"] = d_b
    verdicts["D"] = AssumptionVerdict("D", "satisfied" if (d_a or d_b) else "violated", 0.0,
                                      None if (d_a or d_b) else _witness(X[0], Y[0]),
                                      "case a" if d_a else ("case b" if d_b else "neither case holds"))

    return AssumptionReport(box.describe(), verdicts, constants, tol)


def recheck_constants(model, report, grid_density=21):
    """Re-evaluate each fitted constant's defining inequality on the grid.

    Returns a dict of worst margins; each should be >= -tol.
    """
    box = Box(report.box["x_lo"], report.box["x_hi"], report.box["y_lo"], report.box["y_hi"])
    X, Y = _sample_points(model, box, grid_density)
    c = report.constants
    out = {}
    U = model.control_set.points
    Xu = np.repeat(X, len(U), axis=0)
    Yu = np.repeat(Y, len(U), axis=0)
    Uu = np.tile(U, (len(X), 1))
    if "C" in c:
        growth = 1.0 + np.linalg.norm(Xu, axis=1) + np.linalg.norm(Yu, axis=1)
        fn = np.linalg.norm(np.asarray(model.f(Xu, Yu, Uu)), axis=1)
        out["C"] = float((c["C"] * growth - fn).min())
    rho = np.asarray(model.rho(X, Y))
    eig = np.linalg.eigvalsh(rho @ np.swapaxes(rho, -1, -2))
    if "Lambda_lower" in c:
        out["Lambda_lower"] = float((eig[:, 0] - c["Lambda_lower"]).min())
        out["Lambda_upper"] = float((c["Lambda_upper"] - eig[:, -1]).min())
    if "A" in c:
        yn = np.linalg.norm(Y, axis=1)
        sel = yn >= c["R"]
        bd = np.einsum("ij,ij->i", np.asarray(model.b(X, Y)), Y)
        out["A"] = float((-bd[sel] - c["A"] * yn[sel]).min()) if np.any(sel) else 0.0
    if "K" in c:
        q = 1.0 + (X**2).sum(1) + (Y**2).sum(1)
        out["K"] = float((c["K"] * q - np.abs(np.asarray(model.g(X, Y)))).min())
    return out


# ---------------------------------------------------------------------------
# flat key-value configs


def parse_kv(text):
    """Parse ``key = value`` lines with ``#`` comments and optional ``[section]`` headers.

    Returns ``(globals, sections)`` where ``sections`` maps section name to its
    key-value dict, in file order.
    """
    top = {}
    sections = {}
    current = top
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ParameterError(f"line {lineno}: empty section name")
            if name in sections:
                raise ParameterError(f"line {lineno}: duplicate section [{name}]")
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ParameterError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParameterError(f"line {lineno}: empty key")
        if key in current:
            raise ParameterError(f"line {lineno}: duplicate key {key!r}")
        current[key] = value
    return top, sections


def format_kv(pairs):
    lines = []
    for key, value in pairs.items():
        if isinstance(value, float):
            value = format(value, ".17g")
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def model_to_config(model):
    """Serialize a benchmark model's parameter record as key-value text."""
    if model.name not in BENCHMARKS:
        raise ParameterError("only benchmark models serialize to configs")
    return format_kv({"benchmark": model.name, **model.params})


def model_from_config(text):
    top, sections = parse_kv(text)
    if sections:
        raise ParameterError("model configs have no sections")
    record = dict(top)
    name = record.pop("benchmark", None)
    if name is None:
        raise ParameterError("missing key 'benchmark'")
    return make_benchmark(name, record)
