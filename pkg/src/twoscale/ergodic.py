"""Long-time behaviour of the frozen-x fast subsystem.

Invariant-measure sampling, deterministic Gibbs quadrature, histogram TV decay,
exit times from balls, the closed-form reflected barrier, 1D Wasserstein
distances and a Lyapunov-function diagnostic.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ParameterError
from .numerics import gauss_legendre, linear_fit, mean_and_se, tensor_gauss_legendre, tree_mean, tree_sum
from .parallel import DEFAULT_CHUNK, map_chunks
from .rng import as_noise
from .sde import _RadialStepper, _per_path, bridge_exit_probability, simulate_fast_ensemble, steps_for

# reference chains live in their own path-index namespace
REFERENCE_PATH_OFFSET = 1 << 40


# ---------------------------------------------------------------------------
# empirical measures


class EmpiricalMeasure:
    """Weighted point cloud on fast-variable space.

    Parameters
    ----------
    points : array (N, m) or (N,)
    weights : array (N,), optional
        Nonnegative; normalised to sum to one. Uniform if omitted.
    provenance : dict, optional
        Free-form record of how the sample was produced.
    chain_ids : array (N,), optional
        Chain label per sample, used for batch-means standard errors.
    """

    def __init__(self, points, weights=None, provenance=None, chain_ids=None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ParameterError("points must be a nonempty (N, m) array")
        if weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
            self.uniform = True
        else:
            w = np.asarray(weights, dtype=float)
            if w.shape != (pts.shape[0],) or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ParameterError("weights must be finite, nonnegative and one per point")
            total = tree_sum(w)
            if total <= 0:
                raise ParameterError("weights must not all vanish")
            w = w / total
            self.uniform = False
        self.points = pts
        self.weights = w
        self.provenance = dict(provenance or {})
        self.chain_ids = None if chain_ids is None else np.asarray(chain_ids)
        self.moments = self._raw_moments()

    @property
    def m(self):
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]

    def _raw_moments(self):
        """Raw moments of orders 1..4 per coordinate, shape (4, m)."""
        return np.stack([tree_sum(self.weights[:, None] * self.points**k) for k in range(1, 5)])

    def expect(self, h):
        """Weighted average of ``h(points)`` (``h`` maps (N, m) to (N,) or (N, d))."""
        vals = np.asarray(h(self.points), dtype=float)
        w = self.weights if vals.ndim == 1 else self.weights[:, None]
        return tree_sum(w * vals)

    def mean(self):
        return self.moments[0].copy()

    def variance(self):
        mu = self.moments[0]
        return tree_sum(self.weights[:, None] * (self.points - mu) ** 2)

    def standard_error(self, h=None):
        """Standard error of ``E[h]`` (default: of each coordinate mean).

        With two or more chains the batch-means estimator across chains is
        used, which accounts for autocorrelation within chains.
        """
        vals = self.points if h is None else np.asarray(h(self.points), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if not self.uniform:
            mu = tree_sum(self.weights[:, None] * vals)
            ess = 1.0 / tree_sum(self.weights**2)
            var = tree_sum(self.weights[:, None] * (vals - mu) ** 2)
            return np.sqrt(var / ess)
        if self.chain_ids is not None:
            ids, inv = np.unique(self.chain_ids, return_inverse=True)
            if len(ids) >= 2:
                counts = np.bincount(inv)
                if np.all(counts == counts[0]):
                    order = np.argsort(inv, kind="stable")
                    batch = vals[order].reshape(len(ids), counts[0], -1)
                    return mean_and_se(tree_mean(batch, axis=1))[1]
        return mean_and_se(vals)[1]

    def to_csv(self, target=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"y_{i + 1}" for i in range(self.m)] + ["weight"])
        for row, wt in zip(self.points, self.weights):
            w.writerow([format(v, ".17g") for v in row] + [format(wt, ".17g")])
        text = buf.getvalue()
        if target is not None:
            with open(target, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, source):
        """Read a measure written by :meth:`to_csv` from a path or an open text stream."""
        if hasattr(source, "read"):
            rows = list(csv.reader(source))
        else:
            with open(source, encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        return cls(data[:, :-1], data[:, -1])


def relaxation_time(model, x_frozen, y_probe=None, h=1e-5):
    """Inverse contraction rate of the fast drift from a finite-difference Jacobian.

    The Jacobian of ``b(x, .)`` is probed at the origin, at ``y_probe`` and at
    unit offsets; the slowest rate among them is used.
    """
    m = model.m
    x = np.atleast_1d(np.asarray(x_frozen, dtype=float))
    probes = [np.zeros(m)] + [np.eye(m)[i] * s for i in range(m) for s in (1.0, -1.0)]
    if y_probe is not None:
        probes.append(np.atleast_1d(np.asarray(y_probe, dtype=float)))
    rates = []
    for y in probes:
        ys = np.concatenate([y + h * np.eye(m), y - h * np.eye(m)])
        xs = np.broadcast_to(x, (2 * m, model.n))
        bb = np.asarray(model.b(xs, ys), dtype=float)
        jac = ((bb[:m] - bb[m:]) / (2 * h)).T
        rates.append(-float(np.max(np.linalg.eigvals(jac).real)))
    rate = min(rates)
    if not rate > 0:
        raise ParameterError("fast drift Jacobian is not contracting; pass thinning_time explicitly")
    return 1.0 / rate


def sample_invariant_measure(model, x_frozen, n_samples, burn_in_time, thinning_time=None, dt=0.01, seed=0,
                             n_chains=1, y0=None, workers=1, first_path=0):
    """Sample the invariant law of the fast subsystem at frozen ``x``.

    Each of ``n_chains`` chains runs ``burn_in_time`` and then contributes a
    sample every ``thinning_time`` (default ten relaxation times).
    """
    if not burn_in_time > 0:
        raise ParameterError("burn_in_time > 0 violated")
    if n_samples < 1 or n_chains < 1 or n_samples % n_chains:
        raise ParameterError("n_samples must be a positive multiple of n_chains")
    if thinning_time is None:
        thinning_time = 10.0 * relaxation_time(model, x_frozen, y0)
    if thinning_time < dt * (1 - 1e-12):
        raise ParameterError("thinning_time >= dt violated")
    burn = steps_for(burn_in_time, dt, "burn_in_time")
    thin = max(1, int(round(thinning_time / dt)))
    per_chain = n_samples // n_chains
    snaps = [burn + j * thin for j in range(per_chain)]
    total = snaps[-1]
    start = np.zeros(model.m) if y0 is None else y0
    _, stack = simulate_fast_ensemble(model, x_frozen, start, total * dt, dt, n_chains, seed, workers=workers,
                                      first_path=first_path, snapshot_steps=snaps)
    # stack has shape (per_chain, n_chains, m); order samples chain by chain
    pts = np.swapaxes(stack, 0, 1).reshape(-1, model.m)
    chain_ids = np.repeat(np.arange(n_chains), per_chain)
    prov = {
        "model": model.name,
        "x_frozen": np.atleast_1d(np.asarray(x_frozen, dtype=float)).tolist(),
        "burn_in_time": float(burn_in_time),
        "thinning_time": thin * dt,
        "dt": float(dt),
        "seed": int(getattr(seed, "seed", seed)),
        "n_chains": int(n_chains),
    }
    return EmpiricalMeasure(pts, provenance=prov, chain_ids=chain_ids)


# ---------------------------------------------------------------------------
# Gibbs quadrature

_LOG_DENSITY_CUTOFF = 46.0  # exp(-46) ~ 1e-20 relative density at the box edge
_TAIL_MASS_LIMIT = 1e-8


@dataclass
class GibbsRule:
    """Quadrature rule for a Gibbs density: nodes, normalised weights, box."""

    nodes: np.ndarray
    weights: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    tail_bound: float

    def expect(self, h):
        vals = np.asarray(h(self.nodes), dtype=float)
        w = self.weights if vals.ndim == 1 else self.weights[:, None]
        return np.sum(w * vals, axis=0)


def _search_box(energy, m, search_nodes=2049):
    """Locate a box outside of which ``energy - min`` exceeds the cutoff."""
    centre = np.zeros(m)
    half = 1.0
    per_axis = search_nodes if m == 1 else 257
    for _ in range(64):
        axes = [np.linspace(c - half, c + half, per_axis) for c in centre]
        mesh = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=-1)
        e = np.asarray(energy(mesh), dtype=float)
        if not np.all(np.isfinite(e)):
            e = np.where(np.isfinite(e), e, np.inf)
        e_min = float(np.min(e))
        grid_e = (e - e_min).reshape((per_axis,) * m)
        edge = np.concatenate([np.take(grid_e, idx, axis=a).ravel() for a in range(m) for idx in (0, -1)])
        if np.all(edge > _LOG_DENSITY_CUTOFF):
            inside = grid_e <= _LOG_DENSITY_CUTOFF
            lo, hi = [], []
            for a in range(m):
                other = tuple(i for i in range(m) if i != a)
                occ = np.flatnonzero(inside.any(axis=other) if other else inside)
                lo.append(axes[a][max(occ[0] - 1, 0)])
                hi.append(axes[a][min(occ[-1] + 1, per_axis - 1)])
            return np.array(lo), np.array(hi)
        centre = mesh[int(np.argmin(e))]
        half *= 2.0
        if half > 1e8:
            break
    raise ParameterError("potential is not confining on the quadrature box")


def _tail_bound(energy, grad, lo, hi, z):
    """Bound on the mass outside the box, assuming convex tails beyond the faces.

    For each face, the density beyond it is at most ``exp(-E(face)) / E'(face)``
    per unit face length, where ``E'`` is the outward energy slope.
    """
    m = lo.size
    bound = 0.0
    n_face = 33
    for a in range(m):
        for side, coord in ((-1.0, lo[a]), (1.0, hi[a])):
            if m == 1:
                pts = np.array([[coord]])
                length = 1.0
            else:
                b = 1 - a
                pts = np.zeros((n_face, 2))
                pts[:, a] = coord
                pts[:, b] = np.linspace(lo[b], hi[b], n_face)
                length = (hi[b] - lo[b]) / (n_face - 1)
            slope = side * np.asarray(grad(pts), dtype=float)[:, a]
            if np.any(slope <= 0):
                raise ParameterError("potential is not confining on the quadrature box")
            e = np.asarray(energy(pts), dtype=float)
            bound += float(np.sum(np.exp(-e) / slope)) * length
    return bound / z


def gibbs_rule(potential, beta, m=1, grad=None, n_nodes=257):
    """Gauss-Legendre rule for the density proportional to ``exp(-beta * potential)``.

    ``potential`` maps (N, m) arrays to (N,). ``grad`` maps (N, m) to (N, m);
    central differences are used when it is omitted.
    """
    if not beta > 0:
        raise ParameterError("beta > 0 violated")
    if m not in (1, 2):
        raise ParameterError("Gibbs quadrature supports m <= 2")

    def raw(y):
        return beta * np.asarray(potential(y), dtype=float)

    lo, hi = _search_box(raw, m)
    nodes, w = tensor_gauss_legendre(lo, hi, n_nodes)
    e = raw(nodes)
    shift = float(np.min(e))
    dens = w * np.exp(-(e - shift))
    z = float(np.sum(dens))

    def energy(y):
        return raw(y) - shift

    if grad is None:
        def grad_fn(y, h=1e-6):
            out = np.empty_like(y)
            for a in range(m):
                d = np.zeros(m)
                d[a] = h
                out[:, a] = (raw(y + d) - raw(y - d)) / (2 * h)
            return out
    else:
        def grad_fn(y):
            return beta * np.asarray(grad(y), dtype=float)

    tail = _tail_bound(energy, grad_fn, lo, hi, z)
    if tail >= _TAIL_MASS_LIMIT:
        raise ParameterError(f"Gibbs mass outside the quadrature box may reach {tail:.3g}")
    return GibbsRule(nodes, dens / z, lo, hi, tail)


def gibbs_oracle(potential, beta, query="mean", h=None, m=1, grad=None, n_nodes=257):
    """Deterministic Gibbs expectations by quadrature.

    ``query`` is ``"mean"``, ``"variance"`` (covariance matrix when m = 2) or
    ``"expectation"`` of the supplied ``h``.
    """
    rule = gibbs_rule(potential, beta, m, grad, n_nodes)
    mean = rule.expect(lambda y: y)
    if query == "mean":
        return float(mean[0]) if m == 1 else mean
    if query == "variance":
        cov = rule.expect(lambda y: ((y - mean)[:, :, None] * (y - mean)[:, None, :]).reshape(len(y), -1))
        cov = cov.reshape(m, m)
        return float(cov[0, 0]) if m == 1 else cov
    if query == "expectation":
        if h is None:
            raise ParameterError("query 'expectation' requires h")
        val = rule.expect(h)
        return float(val) if np.ndim(val) == 0 else val
    raise ParameterError(f"unknown query {query!r}")


def model_gibbs_rule(model, x_frozen, n_nodes=257):
    """Gibbs rule for a model whose fast invariant log-density is known in closed form."""
    if model.fast_log_density is None:
        raise ParameterError("model has no closed-form fast invariant density")
    x = np.atleast_1d(np.asarray(x_frozen, dtype=float))

    def potential(y):
        return -np.asarray(model.fast_log_density(np.broadcast_to(x, (len(y), model.n)), y), dtype=float)

    return gibbs_rule(potential, 1.0, model.m, None, n_nodes)


# ---------------------------------------------------------------------------
# total-variation decay


@dataclass
class TVProfile:
    checkpoints: list
    tv: list
    noise_floor: float
    decay_exponent: Optional[float]
    fit_r2: Optional[float]
    monotone: bool
    unreliable: bool
    n_bins: int

    def to_records(self):
        return [{"t": t, "tv_estimate": v} for t, v in zip(self.checkpoints, self.tv)]

    def to_dict(self):
        return {
            "profile": self.to_records(),
            "noise_floor": self.noise_floor,
            "decay_exponent": self.decay_exponent,
            "fit_r2": self.fit_r2,
            "monotone": self.monotone,
            "unreliable": self.unreliable,
            "n_bins": self.n_bins,
        }


class Histogram:
    """Fixed-width bins over a quantile box of a reference sample, plus overflow bins."""

    def __init__(self, reference_points, n_bins=64, q_lo=0.001, q_hi=0.999):
        ref = np.asarray(reference_points, dtype=float)
        if ref.ndim == 1:
            ref = ref[:, None]
        if ref.shape[1] > 2:
            raise ParameterError("histogram TV supports m <= 2")
        self.lo = np.quantile(ref, q_lo, axis=0)
        self.hi = np.quantile(ref, q_hi, axis=0)
        same = self.hi <= self.lo
        self.hi = np.where(same, self.lo + 1.0, self.hi)
        self.n_bins = n_bins
        self.m = ref.shape[1]

    @property
    def total_bins(self):
        return (self.n_bins + 2) ** self.m

    def frequencies(self, points, weights=None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        # index 0 and n_bins + 1 are the overflow bins
        idx = np.floor((pts - self.lo) / (self.hi - self.lo) * self.n_bins).astype(np.int64) + 1
        idx = np.clip(idx, 0, self.n_bins + 1)
        flat = np.ravel_multi_index(tuple(idx.T), (self.n_bins + 2,) * self.m)
        if weights is None:
            counts = np.bincount(flat, minlength=self.total_bins).astype(float)
            return counts / len(pts)
        return np.bincount(flat, weights=weights, minlength=self.total_bins)


def histogram_tv(p, q):
    return 0.5 * float(np.sum(np.abs(p - q)))


def tv_decay_profile(model, x_frozen, y0, time_checkpoints, n_paths, dt, seed, n_bins=64, reference=None,
                     workers=1):
    """Histogram TV distance between the time-t law and an invariant sample.

    If ``reference`` is omitted it is drawn with :func:`sample_invariant_measure`
    (``n_paths`` chains, burn-in of 20 relaxation times) on a separate
    path-index range of the same seed.
    """
    cps = [float(t) for t in time_checkpoints]
    if not cps or any(b <= a for a, b in zip(cps, cps[1:])) or cps[0] < 0:
        raise ParameterError("checkpoints must be a nonempty increasing list of nonnegative times")
    steps = [0 if t == 0 else steps_for(t, dt, "checkpoint") for t in cps]
    if reference is None:
        tau = relaxation_time(model, x_frozen, y0)
        burn = max(dt, round(20 * tau / dt) * dt)
        reference = sample_invariant_measure(model, x_frozen, n_paths, burn, dt, dt, seed, n_chains=n_paths,
                                             workers=workers, first_path=REFERENCE_PATH_OFFSET)
    hist = Histogram(reference.points, n_bins)
    p_ref = hist.frequencies(reference.points, None if reference.uniform else reference.weights)
    n_total = max(steps[-1], 1)
    _, stack = simulate_fast_ensemble(model, x_frozen, y0, n_total * dt, dt, n_paths, seed, workers=workers,
                                      snapshot_steps=steps)
    tvs = [histogram_tv(hist.frequencies(stack[i]), p_ref) for i in range(len(cps))]
    n_ref = len(reference) if reference.uniform else 1.0 / float(np.sum(reference.weights**2))
    floor = 0.5 * math.sqrt(2.0 / math.pi) * float(np.sum(np.sqrt(p_ref * (1.0 / n_paths + 1.0 / n_ref))))
    tpos = np.array([t for t, v in zip(cps, tvs) if t > 0 and v > floor])
    vpos = np.array([v for t, v in zip(cps, tvs) if t > 0 and v > floor])
    exponent = r2 = None
    if len(tpos) >= 2:
        slope, _, r2 = linear_fit(np.log1p(tpos), np.log(vpos))
        exponent = -slope
    monotone = all(b <= a for a, b in zip(tvs, tvs[1:]))
    unreliable = n_paths / hist.total_bins < 100
    return TVProfile(cps, tvs, floor, exponent, r2, monotone, unreliable, n_bins)


# ---------------------------------------------------------------------------
# exit times


@dataclass
class ExitTimeEnsemble:
    """Exit times from the ball of one radius; censored paths carry the horizon."""

    radius: float
    y0: np.ndarray
    times: np.ndarray
    censored: np.ndarray
    censor_horizon: float
    seed: int
    dt: float

    def __post_init__(self):
        if np.any(self.times > self.censor_horizon * (1 + 1e-12)):
            raise ParameterError("exit times exceed the censoring horizon")
        if np.any(self.times[self.censored] != self.censor_horizon):
            raise ParameterError("censored paths must carry the censoring horizon")

    @property
    def censored_fraction(self):
        return float(np.mean(self.censored))

    def mean_exit_time(self):
        """Mean of min(tau, horizon) with its standard error (a lower bound for E[tau])."""
        mean, se = mean_and_se(self.times)
        return float(mean), float(se)

    def to_dict(self):
        mean, se = self.mean_exit_time()
        return {
            "radius": self.radius,
            "n_paths": int(len(self.times)),
            "mean_exit_time": mean,
            "standard_error": se,
            "censored_fraction": self.censored_fraction,
            "censor_horizon": self.censor_horizon,
        }


def default_censor_horizon(model, x_frozen, y0, radius):
    x = np.atleast_1d(np.asarray(x_frozen, dtype=float))[None, :]
    y = np.atleast_1d(np.asarray(y0, dtype=float))[None, :]
    rho = np.asarray(model.rho(x, y), dtype=float)[0]
    rho_bar = float(np.trace(rho @ rho.T)) / model.m
    return 10.0 * radius**2 / rho_bar


def _exit_chunk(model, x, y, dt, n_steps, noise, paths, radii, bridge, block=128):
    P = len(paths)
    nr = len(radii)
    tau = np.full((nr, P), np.inf)
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
        ta = tau[:, active]
        for j in range(nb):
            t_end = (k + j + 1) * dt
            ya, n_new, n_old, a = stepper.step(xa, ya, dW[j], None if incr is None else incr[j], t_end,
                                               radial=bridge)
            for i, radius in enumerate(radii):
                hit = n_new >= radius
                if bridge:
                    hit |= unif[j] < bridge_exit_probability(radius, n_old, n_new, a, dt)
                fresh = hit & ~np.isfinite(ta[i])
                ta[i, fresh] = t_end
        y[active] = ya
        tau[:, active] = ta
        k += nb
        active = active[~np.isfinite(tau[-1, active])]
    return tau


def exit_time_ensemble(model, x_frozen, y0, radius_list, dt, n_paths, censor_horizon=None, seed=0,
                       workers=1, bridge=True, chunk_size=DEFAULT_CHUNK):
    """Exit times of the fast subsystem from nested balls, one trajectory set for all radii.

    With ``bridge`` a Brownian-bridge crossing test flags exits between grid
    times; one uniform per step is shared by all radii so the exit times stay
    nested path by path.
    """
    radii = [float(v) for v in radius_list]
    if not radii or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ParameterError("radius_list must be a nonempty increasing list")
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    if np.linalg.norm(y0) >= radii[0]:
        raise ParameterError("y0 must lie inside the smallest ball")
    if censor_horizon is None:
        censor_horizon = default_censor_horizon(model, x_frozen, y0, radii[-1])
    if not (np.isfinite(censor_horizon) and censor_horizon > 0):
        raise ParameterError("censor_horizon must be finite and positive")
    n_steps = int(math.ceil(censor_horizon / dt - 1e-9))
    horizon = n_steps * dt
    noise = as_noise(seed)

    def work(a, b):
        paths = np.arange(a, b, dtype=np.int64)
        x = _per_path(x_frozen, model.n, a, b, "x_frozen")
        y = _per_path(y0, model.m, a, b, "y0")
        return _exit_chunk(model, x, y, dt, n_steps, noise, paths, radii, bridge)

    tau = np.concatenate(map_chunks(work, n_paths, workers, chunk_size), axis=1)
    out = []
    for i, radius in enumerate(radii):
        cens = ~np.isfinite(tau[i])
        times = np.where(cens, horizon, tau[i])
        out.append(ExitTimeEnsemble(radius, y0, times, cens, horizon, int(getattr(noise, "seed", seed)), dt))
    return out


def laplace_exit(ensemble: ExitTimeEnsemble, delta):
    """Monte Carlo ``E[exp(-delta * tau)]`` with censored paths at the horizon."""
    if not delta > 0:
        raise ParameterError("delta > 0 violated")
    vals = np.exp(-delta * ensemble.times)
    mean, se = mean_and_se(vals)
    bias = ensemble.censored_fraction * math.exp(-delta * ensemble.censor_horizon)
    return {"estimate": float(mean), "standard_error": float(se), "censoring_bias_bound": bias}


# ---------------------------------------------------------------------------
# reflected barrier


def _barrier_roots(eta, gamma):
    disc = math.sqrt(eta * eta + 4.0 * gamma)
    return 0.5 * (eta + disc), 0.5 * (eta - disc)


def _barrier_check(n, R, eta, gamma):
    if not R < n:
        raise ParameterError("R < n violated")
    if not (eta > 0 and gamma > 0):
        raise ParameterError("eta > 0 and gamma > 0 violated")


def barrier_closed_form(z, n, R, eta, gamma, derivative=0):
    """The barrier formula and its z-derivatives, without domain checks."""
    l1, l2 = _barrier_roots(eta, gamma)
    z = np.asarray(z, dtype=float)

    def combo(s, k):
        return -l2 * l1**k * np.exp(l1 * s) + l1 * l2**k * np.exp(l2 * s)

    return combo(z - R, derivative) / combo(n - R, 0)


def reflected_barrier_phi(z, n, R, eta, gamma):
    """Solution of ``phi'' - eta phi' - gamma phi = 0`` with ``phi'(R) = 0`` and ``phi(n) = 1``."""
    _barrier_check(n, R, eta, gamma)
    za = np.asarray(z, dtype=float)
    if np.any(za < R) or np.any(za > n):
        raise ParameterError("z must lie in [R, n]")
    out = barrier_closed_form(za, n, R, eta, gamma)
    return float(out) if out.ndim == 0 else out


def reflected_barrier_residual(z, n, R, eta, gamma):
    """ODE residual ``phi'' - eta phi' - gamma phi`` of the barrier at ``z``."""
    _barrier_check(n, R, eta, gamma)
    za = np.asarray(z, dtype=float)
    if np.any(za < R) or np.any(za > n):
        raise ParameterError("z must lie in [R, n]")
    d0 = barrier_closed_form(za, n, R, eta, gamma, 0)
    d1 = barrier_closed_form(za, n, R, eta, gamma, 1)
    d2 = barrier_closed_form(za, n, R, eta, gamma, 2)
    res = d2 - eta * d1 - gamma * d0
    return float(res) if res.ndim == 0 else res


# ---------------------------------------------------------------------------
# Wasserstein distance


def wasserstein2_1d(mu1: EmpiricalMeasure, mu2: EmpiricalMeasure):
    """W2 between two 1D empirical measures by the quantile coupling.

    The quantile functions are step functions, so the integral of their squared
    difference over (0, 1) is computed exactly on the merged breakpoints. This
    handles unequal sizes and weights without resampling.
    """
    if mu1.m != 1 or mu2.m != 1:
        raise ParameterError("wasserstein2_1d requires m = 1")
    o1 = np.argsort(mu1.points[:, 0], kind="stable")
    o2 = np.argsort(mu2.points[:, 0], kind="stable")
    x1, w1 = mu1.points[o1, 0], mu1.weights[o1]
    x2, w2 = mu2.points[o2, 0], mu2.weights[o2]
    if len(x1) == len(x2) and mu1.uniform and mu2.uniform:
        return float(np.sqrt(tree_mean((x1 - x2) ** 2)))
    c1 = np.cumsum(w1)
    c2 = np.cumsum(w2)
    c1[-1] = c2[-1] = 1.0
    s = np.union1d(c1, c2)
    ds = np.diff(np.concatenate([[0.0], s]))
    i1 = np.minimum(np.searchsorted(c1, s, side="left"), len(x1) - 1)
    i2 = np.minimum(np.searchsorted(c2, s, side="left"), len(x2) - 1)
    return float(np.sqrt(tree_sum(ds * (x1[i1] - x2[i2]) ** 2)))


def wasserstein_bound(model, x1, x2, mu_x2: EmpiricalMeasure, kappa, rho_bar):
    """Drift-gap bound on W2(mu_x1, mu_x2), in both prefactor forms.

    Returns ``{"drift_gap_l2", "with_rho_bar", "without_rho_bar"}`` where the
    drift gap is the L2(mu_x2) norm of ``b(x1, .) - b(x2, .)``.
    """
    y = mu_x2.points
    xa = np.broadcast_to(np.atleast_1d(np.asarray(x1, dtype=float)), (len(y), model.n))
    xb = np.broadcast_to(np.atleast_1d(np.asarray(x2, dtype=float)), (len(y), model.n))
    gap = np.asarray(model.b(xa, y)) - np.asarray(model.b(xb, y))
    norm = float(np.sqrt(tree_sum(mu_x2.weights * np.sum(gap**2, axis=1))))
    return {
        "drift_gap_l2": norm,
        "with_rho_bar": rho_bar * norm / kappa,
        "without_rho_bar": norm / kappa,
    }


# ---------------------------------------------------------------------------
# Lyapunov diagnostic


@dataclass
class LyapunovProfile:
    rows: list = field(default_factory=list)
    threshold: Optional[float] = None

    @property
    def message(self):
        if self.threshold is None:
            return "no Lyapunov radius within grid"
        return f"generator bound positive for |y| >= {self.threshold!r}"

    def to_dict(self):
        return {"rows": self.rows, "threshold": self.threshold, "message": self.message}


def _directions(m, n_dirs):
    if m == 1:
        return np.array([[1.0], [-1.0]])
    if m == 2:
        ang = 2 * np.pi * np.arange(n_dirs) / n_dirs
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    z = np.random.default_rng(0).standard_normal((n_dirs, m))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def neg_generator_lyapunov(model, x_frozen, y):
    """The lower bound expression for ``-L omega`` at points ``y`` (shape (N, m))."""
    y = np.asarray(y, dtype=float)
    x = np.broadcast_to(np.atleast_1d(np.asarray(x_frozen, dtype=float)), (len(y), model.n))
    b = np.asarray(model.b(x, y), dtype=float)
    rho = np.asarray(model.rho(x, y), dtype=float)
    a = rho @ np.swapaxes(rho, -1, -2)
    r2 = np.sum(y * y, axis=1)
    c = 0.5 + 0.5 * np.log(r2)
    by = np.sum(b * y, axis=1)
    tr = np.trace(a, axis1=-2, axis2=-1)
    yay = np.einsum("pi,pij,pj->p", y, a, y)
    return -c * by - c * tr - yay / r2


def lyapunov_diagnostic(model, x_frozen, radius_grid, angular_samples=64):
    """Minimum of the generator bound over sampled spheres, per radius."""
    radii = sorted(float(r) for r in radius_grid)
    if not radii or radii[0] <= 1:
        raise ParameterError("radii must exceed 1")
    dirs = _directions(model.m, angular_samples)
    prof = LyapunovProfile()
    mins = []
    for rad in radii:
        vals = neg_generator_lyapunov(model, x_frozen, rad * dirs)
        mins.append(float(np.min(vals)))
        prof.rows.append({"radius": rad, "min_neg_generator": mins[-1]})
    # smallest grid radius from which every larger grid radius stays positive
    for i in range(len(radii)):
        if all(v > 0 for v in mins[i:]):
            prof.threshold = radii[i]
            break
    return prof
