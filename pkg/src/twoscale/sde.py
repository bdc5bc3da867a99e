"""Euler-Maruyama simulation of the two-scale system and Monte Carlo payoffs.

All ensembles are vectorized over paths. Noise comes from a counter-based
source, so each path depends only on ``(seed, path_index)`` and the inputs,
never on the batch it was simulated in or on the worker count.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import BlowUpError, ParameterError, StepSizeError
from .model import ControlSet, TwoScaleModel
from .numerics import mean_and_se
from .parallel import DEFAULT_CHUNK, map_chunks
from .rng import as_noise

STIFFNESS_RATIO = 10.0
_BLOCK_FLOATS = 1 << 20
_SQRT2 = np.sqrt(2.0)


def steps_for(span, dt, what="horizon"):
    """Number of steps of size ``dt`` covering ``span``; rejects non-integral ratios."""
    if not dt > 0:
        raise ParameterError("dt > 0 violated")
    ratio = span / dt
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
        raise ParameterError(f"{what}/dt must be a positive integer (got {ratio!r})")
    return k


class ControlPolicy:
    """Feedback control ``(t, x, y) -> u`` restricted to a control set.

    Use the constructors :meth:`constant`, :meth:`feedback` and
    :meth:`grid_indexed` rather than calling ``__init__`` directly.
    """

    TAGS = ("constant", "feedback", "grid-indexed")

    def __init__(self, fn: Callable, tag: str, control_set: ControlSet, label: str = ""):
        if tag not in self.TAGS:
            raise ParameterError(f"unknown policy tag {tag!r}")
        self._fn = fn
        self.tag = tag
        self.control_set = control_set
        self.label = label or tag

    @classmethod
    def constant(cls, control_set, u, label=""):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.shape != (control_set.k,):
            raise ParameterError("constant control has the wrong dimension")
        return cls(lambda t, x, y: np.broadcast_to(u, (x.shape[0], u.size)), "constant", control_set,
                   label or f"u={u.tolist()}")

    @classmethod
    def feedback(cls, control_set, fn, label=""):
        return cls(fn, "feedback", control_set, label)

    @classmethod
    def grid_indexed(cls, control_set, index_fn, label=""):
        """``index_fn(t, x, y)`` returns integer indices into ``control_set.points``."""
        pts = control_set.points

        def fn(t, x, y):
            idx = np.asarray(index_fn(t, x, y), dtype=np.int64)
            return pts[np.broadcast_to(idx, (x.shape[0],))]

        return cls(fn, "grid-indexed", control_set, label)

    def __call__(self, t, x, y):
        u = np.asarray(self._fn(t, x, y), dtype=float)
        u = np.broadcast_to(u, (x.shape[0], self.control_set.k))
        cs = self.control_set
        if np.any(u < cs.lower - 1e-12) or np.any(u > cs.upper + 1e-12):
            raise ParameterError("policy returned a control outside the control set's bounding box")
        return u


def default_policy(model):
    """The constant policy at the first control point."""
    return ControlPolicy.constant(model.control_set, model.control_set.points[0])


@dataclass
class SamplePath:
    """One simulated trajectory and the noise coordinates that produced it."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    dt: float
    seed: int
    path_index: int

    def __post_init__(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.u) == n):
            raise ParameterError("sample path arrays disagree in length")

    def header(self):
        cols = ["t"]
        cols += [f"x_{i + 1}" for i in range(self.x.shape[1])]
        cols += [f"y_{i + 1}" for i in range(self.y.shape[1])]
        cols += [f"u_{i + 1}" for i in range(self.u.shape[1])]
        return cols

    def to_csv(self, target=None):
        """Write the path as CSV with 17 significant digits; returns the text if no target."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        rows = np.column_stack([self.t, self.x, self.y, self.u])
        for row in rows:
            w.writerow([format(v, ".17g") for v in row])
        text = buf.getvalue()
        if target is None:
            return text
        with open(target, "w", encoding="utf-8") as fh:
            fh.write(text)
        return text


# ---------------------------------------------------------------------------
# vectorized engine


def _per_path(arr, dim, start, stop, label):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        if arr.size != dim:
            raise ParameterError(f"{label} has dimension {arr.size}, expected {dim}")
        return np.broadcast_to(arr, (stop - start, dim)).copy()
    if arr.ndim == 2 and arr.shape[1] == dim:
        return arr[start:stop].copy()
    raise ParameterError(f"{label} must have shape ({dim},) or (n_paths, {dim})")


def _check_finite(x, y, t, prev_x, prev_y):
    if np.isfinite(x.sum()) and np.isfinite(y.sum()):
        return
    ok = np.isfinite(x).all(axis=1) & np.isfinite(y).all(axis=1)
    if not ok.all():
        i = int(np.argmin(ok))
        raise BlowUpError(f"non-finite state at t={t!r}", t, {"x": prev_x[i].tolist(), "y": prev_y[i].tolist()})


class _RadialStepper:
    """Euler step of the frozen fast process with the radial data a ball-exit test needs."""

    def __init__(self, model, dt):
        self.model = model
        self.dt = dt
        self.m = model.m
        self.rho_c = model.constant_rho()
        self.a_c = float((self.rho_c[0] ** 2).sum()) if self.rho_c is not None and self.m == 1 else None

    def increments(self, dW):
        """Precomputed sqrt(2) rho dW for a whole block when rho is constant."""
        if self.rho_c is None:
            return None
        return np.sqrt(2.0) * (dW @ self.rho_c.T)

    def _norm(self, y):
        if self.m == 1:
            return np.abs(y[:, 0])
        return np.linalg.norm(y, axis=1)

    def step(self, xa, ya, dWj, incr_j, t_end, radial=True):
        """Return ``(y_new, |y_new|, |y_old|, a)``; ``a`` is the radial diffusion e^T rho rho^T e."""
        model = self.model
        bx = np.asarray(model.b(xa, ya), dtype=float)
        if incr_j is not None:
            rh = self.rho_c
            y_new = ya + bx * self.dt + incr_j
        else:
            rh = np.asarray(model.rho(xa, ya), dtype=float)
            y_new = ya + bx * self.dt + np.sqrt(2.0) * (rh * dWj[:, None, :]).sum(-1)
        if not math.isfinite(y_new.sum()):
            _check_finite(xa, y_new, t_end, xa, ya)
        n_new = self._norm(y_new)
        if not radial:
            return y_new, n_new, None, None
        n_old = self._norm(ya)
        if self.a_c is not None:
            return y_new, n_new, n_old, self.a_c
        e = ya / np.where(n_old > 0, n_old, 1.0)[:, None]
        e[n_old == 0] = 1.0 / np.sqrt(self.m)
        v = e @ rh if rh.ndim == 2 else (e[:, :, None] * rh).sum(1)
        return y_new, n_new, n_old, (v * v).sum(1)


def bridge_exit_probability(radius, n_old, n_new, a, dt):
    """Probability that a step from |y|=n_old to n_new crossed ``radius`` in between."""
    d1 = np.maximum(radius - n_old, 0.0)
    d2 = np.maximum(radius - n_new, 0.0)
    if np.isscalar(a) and a > 0:
        return np.exp(-(d1 * d2) * (1.0 / (a * dt)))
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        return np.where(np.asarray(a) > 0, np.exp(-d1 * d2 / (a * dt)), 0.0)


@dataclass
class _ChunkResult:
    x: np.ndarray
    y: np.ndarray
    reward: Optional[np.ndarray] = None
    snapshots: Optional[np.ndarray] = None
    trace: Optional[tuple] = None


def _run_chunk(model, policy, t0, x0, y0, dt, n_steps, noise, paths, *, eps, fast_only,
               running=False, snapshot_steps=None, trace=False):
    """Advance one chunk of paths; returns final states and optional records."""
    P = len(paths)
    x = x0
    y = y0
    r = model.r
    sq = np.sqrt(dt)
    c_slow = _SQRT2
    c_fast = np.sqrt(2.0 / eps)
    inv_eps = 1.0 / eps
    T = model.horizon
    lam = model.lam
    reward = np.zeros(P) if running else None
    snap_set = set(int(v) for v in snapshot_steps) if snapshot_steps is not None else None
    snaps = [] if snap_set is not None else None
    if snap_set is not None and 0 in snap_set:
        snaps.append(y.copy())
    traces = ([x.copy()], [y.copy()], []) if trace else None
    block = max(1, min(n_steps, _BLOCK_FLOATS // max(1, P * r)))
    k = 0
    while k < n_steps:
        nb = min(block, n_steps - k)
        dW = noise.normals(paths, k, nb, r) * sq
        for j in range(nb):
            t = t0 + (k + j) * dt
            dw = dW[j]
            if fast_only:
                bx = np.asarray(model.b(x, y), dtype=float)
                rh = np.asarray(model.rho(x, y), dtype=float)
                y_new = y + bx * dt + _SQRT2 * (rh * dw[:, None, :]).sum(-1)
                x_new = x
                _check_finite(x_new, y_new, t + dt, x, y)
            else:
                u = policy(t, x, y)
                fx = np.asarray(model.f(x, y, u), dtype=float)
                sg = np.asarray(model.sigma_eps(eps, x, y, u), dtype=float)
                bx = np.asarray(model.b(x, y), dtype=float)
                rh = np.asarray(model.rho(x, y), dtype=float)
                if running:
                    reward += np.asarray(model.ell(t, x, y, u), dtype=float) * (np.exp(lam * (t - T)) * dt)
                x_new = x + fx * dt + c_slow * (sg * dw[:, None, :]).sum(-1)
                y_new = y + bx * (dt * inv_eps) + c_fast * (rh * dw[:, None, :]).sum(-1)
                _check_finite(x_new, y_new, t + dt, x, y)
                if trace:
                    traces[2].append(u.copy())
            x, y = x_new, y_new
            if trace:
                traces[0].append(x.copy())
                traces[1].append(y.copy())
            if snap_set is not None and (k + j + 1) in snap_set:
                snaps.append(y.copy())
        k += nb
    res = _ChunkResult(x, y, reward)
    if snap_set is not None:
        res.snapshots = np.stack(snaps) if snaps else np.empty((0, P, model.m))
    if trace:
        res.trace = traces
    return res


def _check_stiffness(model, dt):
    bound = model.epsilon / STIFFNESS_RATIO
    if dt > bound * (1 + 1e-12):
        raise StepSizeError(f"dt={dt!r} exceeds the stiffness bound epsilon/10={bound!r}", bound)


def integrate_two_scale(model: TwoScaleModel, policy: Optional[ControlPolicy], x0, y0, dt, seed,
                        path_index=0) -> SamplePath:
    """Simulate one path of the slow-fast system on ``[0, horizon]``.

    Slow and fast blocks consume the same Brownian increment at each step.
    """
    _check_stiffness(model, dt)
    n_steps = steps_for(model.horizon, dt)
    policy = policy or default_policy(model)
    noise = as_noise(seed)
    paths = np.array([path_index], dtype=np.int64)
    x = _per_path(x0, model.n, 0, 1, "x0")
    y = _per_path(y0, model.m, 0, 1, "y0")
    res = _run_chunk(model, policy, 0.0, x, y, dt, n_steps, noise, paths, eps=model.epsilon,
                     fast_only=False, trace=True)
    xs, ys, us = res.trace
    t_last = model.horizon
    us.append(policy(t_last, xs[-1], ys[-1]).copy())
    t = np.arange(n_steps + 1) * dt
    return SamplePath(t, np.concatenate(xs), np.concatenate(ys), np.concatenate(us), dt,
                      getattr(noise, "seed", seed), int(path_index))


def integrate_fast(model: TwoScaleModel, x_frozen, y0, T, dt, seed, path_index=0) -> SamplePath:
    """Simulate one path of the frozen-x fast subsystem (epsilon = 1)."""
    n_steps = steps_for(T, dt, "T")
    noise = as_noise(seed)
    paths = np.array([path_index], dtype=np.int64)
    x = _per_path(x_frozen, model.n, 0, 1, "x_frozen")
    y = _per_path(y0, model.m, 0, 1, "y0")
    res = _run_chunk(model, None, 0.0, x, y, dt, n_steps, noise, paths, eps=1.0, fast_only=True, trace=True)
    ys = np.concatenate(res.trace[1])
    t = np.arange(n_steps + 1) * dt
    empty = np.empty((n_steps + 1, 0))
    return SamplePath(t, empty, ys, empty.copy(), dt, getattr(noise, "seed", seed), int(path_index))


def simulate_fast_ensemble(model, x_frozen, y0, T, dt, n_paths, seed, workers=1, first_path=0,
                           snapshot_steps=None, chunk_size=DEFAULT_CHUNK):
    """Final fast states ``(n_paths, m)`` of the frozen-x fast subsystem.

    With ``snapshot_steps`` (step counts, 0 meaning the initial state) also
    returns the states after those steps, shape ``(n_snapshots, n_paths, m)``.
    """
    if n_paths < 1:
        raise ParameterError("n_paths >= 1 required")
    n_steps = steps_for(T, dt, "T")
    noise = as_noise(seed)

    def work(a, b):
        paths = np.arange(first_path + a, first_path + b, dtype=np.int64)
        x = _per_path(x_frozen, model.n, a, b, "x_frozen")
        y = _per_path(y0, model.m, a, b, "y0")
        return _run_chunk(model, None, 0.0, x, y, dt, n_steps, noise, paths, eps=1.0, fast_only=True,
                          snapshot_steps=snapshot_steps)

    chunks = map_chunks(work, n_paths, workers, chunk_size)
    y_final = np.concatenate([c.y for c in chunks])
    if snapshot_steps is not None:
        return y_final, np.concatenate([c.snapshots for c in chunks], axis=1)
    return y_final


def simulate_ensemble(model, policy, x0, y0, dt, n_paths, seed, t0=0.0, workers=1, first_path=0,
                      check_stiffness=True, chunk_size=DEFAULT_CHUNK):
    """Terminal states ``(X_T, Y_T)`` of ``n_paths`` paths started at time ``t0``."""
    if n_paths < 1:
        raise ParameterError("n_paths >= 1 required")
    if check_stiffness:
        _check_stiffness(model, dt)
    n_steps = steps_for(model.horizon - t0, dt)
    policy = policy or default_policy(model)
    noise = as_noise(seed)

    def work(a, b):
        paths = np.arange(first_path + a, first_path + b, dtype=np.int64)
        x = _per_path(x0, model.n, a, b, "x0")
        y = _per_path(y0, model.m, a, b, "y0")
        return _run_chunk(model, policy, t0, x, y, dt, n_steps, noise, paths, eps=model.epsilon,
                          fast_only=False)

    chunks = map_chunks(work, n_paths, workers, chunk_size)
    return np.concatenate([c.x for c in chunks]), np.concatenate([c.y for c in chunks])


@dataclass
class PathEnsemble:
    """Recorded trajectories of many paths; arrays are ``(n_times, n_paths, dim)``."""

    t: np.ndarray
    x: np.ndarray
    y: Optional[np.ndarray]
    u: Optional[np.ndarray]
    dt: float
    seed: int
    first_path: int = 0

    def __len__(self):
        return self.x.shape[1]

    def path(self, i) -> SamplePath:
        """The ``i``-th member as a :class:`SamplePath` (needs y and u recorded)."""
        if self.y is None or self.u is None:
            raise ParameterError("ensemble was recorded without y or u")
        return SamplePath(self.t, self.x[:, i], self.y[:, i], self.u[:, i], self.dt, self.seed,
                          self.first_path + int(i))

    def mean_x(self):
        """Ensemble mean and standard error of X at every recorded time."""
        return mean_and_se(np.moveaxis(self.x, 1, 0))


def simulate_path_ensemble(model, policy, x0, y0, dt, n_paths, seed, workers=1, first_path=0, record_every=1,
                           keep_fast=True, check_stiffness=True, chunk_size=DEFAULT_CHUNK) -> PathEnsemble:
    """Simulate ``n_paths`` paths on ``[0, horizon]`` and record every ``record_every``-th step.

    With ``keep_fast=False`` only the slow component is retained.
    """
    if n_paths < 1:
        raise ParameterError("n_paths >= 1 required")
    if record_every < 1:
        raise ParameterError("record_every >= 1 required")
    if check_stiffness:
        _check_stiffness(model, dt)
    n_steps = steps_for(model.horizon, dt)
    policy = policy or default_policy(model)
    noise = as_noise(seed)
    keep = np.arange(0, n_steps + 1, record_every)
    if keep[-1] != n_steps:
        keep = np.append(keep, n_steps)

    def work(a, b):
        paths = np.arange(first_path + a, first_path + b, dtype=np.int64)
        x = _per_path(x0, model.n, a, b, "x0")
        y = _per_path(y0, model.m, a, b, "y0")
        res = _run_chunk(model, policy, 0.0, x, y, dt, n_steps, noise, paths, eps=model.epsilon,
                         fast_only=False, trace=True)
        xs, ys, us = res.trace
        us.append(policy(model.horizon, xs[-1], ys[-1]).copy())
        out = [np.stack([xs[k] for k in keep])]
        if keep_fast:
            out += [np.stack([ys[k] for k in keep]), np.stack([us[k] for k in keep])]
        return out

    chunks = map_chunks(work, n_paths, workers, chunk_size)
    x = np.concatenate([c[0] for c in chunks], axis=1)
    y = np.concatenate([c[1] for c in chunks], axis=1) if keep_fast else None
    u = np.concatenate([c[2] for c in chunks], axis=1) if keep_fast else None
    return PathEnsemble(keep * dt, x, y, u, dt, getattr(noise, "seed", seed), int(first_path))


@dataclass
class PayoffEstimate:
    mean: float
    standard_error: float
    n_paths: int

    def to_dict(self):
        return {"mean": self.mean, "standard_error": self.standard_error, "n_paths": self.n_paths}


def payoff_samples(model, policy, t, x, y, dt, n_paths, seed, workers=1, check_stiffness=True,
                   chunk_size=DEFAULT_CHUNK):
    """Per-path discounted payoffs, in path-index order."""
    if n_paths < 1:
        raise ParameterError("n_paths >= 1 required")
    if not 0 <= t < model.horizon:
        raise ParameterError("start time must lie in [0, horizon)")
    if check_stiffness:
        _check_stiffness(model, dt)
    n_steps = steps_for(model.horizon - t, dt, "horizon - t")
    policy = policy or default_policy(model)
    noise = as_noise(seed)
    disc_T = np.exp(model.lam * (t - model.horizon))

    def work(a, b):
        paths = np.arange(a, b, dtype=np.int64)
        xa = _per_path(x, model.n, a, b, "x")
        ya = _per_path(y, model.m, a, b, "y")
        res = _run_chunk(model, policy, t, xa, ya, dt, n_steps, noise, paths, eps=model.epsilon,
                         fast_only=False, running=True)
        with np.errstate(over="ignore", invalid="ignore"):
            out = disc_T * np.asarray(model.g(res.x, res.y), dtype=float) + res.reward
        bad = ~np.isfinite(out)
        if bad.any():
            i = int(np.argmax(bad))
            raise BlowUpError(f"non-finite payoff on path {a + i}", model.horizon,
                              {"x": res.x[i].tolist(), "y": res.y[i].tolist()})
        return out

    return np.concatenate(map_chunks(work, n_paths, workers, chunk_size))


def estimate_payoff(model, policy, t, x, y, dt, n_paths, seed, workers=1, check_stiffness=True) -> PayoffEstimate:
    """Monte Carlo estimate of the discounted payoff under ``policy``."""
    samples = payoff_samples(model, policy, t, x, y, dt, n_paths, seed, workers, check_stiffness)
    mean, se = mean_and_se(samples)
    return PayoffEstimate(float(mean), float(se), int(n_paths))


@dataclass
class ValueLowerBound:
    best_value: float
    best_policy_index: int
    per_policy_values: list

    def to_dict(self):
        return {
            "best_value": self.best_value,
            "best_policy_index": self.best_policy_index,
            "per_policy_values": [p.to_dict() for p in self.per_policy_values],
        }


def mc_value_lower_bound(model, policy_family, t, x, y, dt, n_paths, seed, workers=1,
                         check_stiffness=True) -> ValueLowerBound:
    """Best payoff over a policy family, every policy on identical noise."""
    if not policy_family:
        raise ParameterError("policy family must be nonempty")
    values = [estimate_payoff(model, p, t, x, y, dt, n_paths, seed, workers, check_stiffness)
              for p in policy_family]
    best = int(np.argmax([v.mean for v in values]))
    return ValueLowerBound(values[best].mean, best, values)
