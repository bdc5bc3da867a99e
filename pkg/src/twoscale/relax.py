"""Deep-relaxation dynamics: local entropy, the two-scale SGD model and its limit.

The fast sampler ``y`` follows Langevin dynamics for
``Phi(y, x) = phi(y) + |x - y|^2 / (2 gamma)`` at inverse temperature beta and the
slow weights descend ``dx = -u (x - y) / gamma dt`` with learning rate u in [0, 1].
As epsilon -> 0 the slow weights follow gradient descent on the local entropy.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import erf, logsumexp

from .ergodic import gibbs_rule
from .errors import ParameterError, QuadratureError
from .model import ControlSet, TwoScaleModel
from .numerics import tensor_gauss_legendre
from .rng import CounterNoise
from .sde import ControlPolicy, PathEnsemble, simulate_path_ensemble

LOSSES = ("quadratic", "double_well", "zero")
DEFAULT_NODES = 257
DEFAULT_HALF_WIDTH = 8.0
MC_SAMPLES = 1_000_000
ROUTE_TOL = 1e-4
MASS_TOL = 1e-8


def _rows(y, n):
    y = np.asarray(y, dtype=float)
    return y.reshape(-1, n) if y.ndim < 2 else y


@dataclass(frozen=True, eq=False)
class RelaxationSpec:
    """Loss landscape and coupling of a deep-relaxation problem.

    ``loss`` maps ``(N, n)`` to ``(N,)`` and ``grad`` maps ``(N, n)`` to ``(N, n)``.
    The Lipschitz constant of ``grad`` is probed on random pairs in the cube
    ``[-probe_radius, probe_radius]^n`` unless given.
    """

    loss: Callable
    grad: Callable
    gamma: float
    beta: float
    n: int = 1
    name: str = "custom"
    params: dict = field(default_factory=dict)
    probe_radius: float = 3.0
    n_probe_pairs: int = 10000
    seed: int = 0
    lipschitz: Optional[float] = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise ParameterError("gamma > 0 violated")
        if not self.beta > 0:
            raise ParameterError("beta > 0 violated")
        if int(self.n) < 1:
            raise ParameterError("n must be a positive integer")
        if self.lipschitz is None:
            object.__setattr__(self, "lipschitz", self.probe_lipschitz())

    # -- constructors -----------------------------------------------------
    @classmethod
    def quadratic(cls, q=1.0, gamma=0.5, beta=1.0, n=1, **kw):
        if q < 0:
            raise ParameterError("q >= 0 violated")

        def loss(y):
            y = _rows(y, n)
            return 0.5 * q * (y * y).sum(-1)

        def grad(y):
            return q * _rows(y, n)

        return cls(loss, grad, gamma, beta, n, "quadratic", {"q": float(q)}, **kw)

    @classmethod
    def double_well(cls, gamma=0.05, beta=1.0, n=1, **kw):
        """``phi(y) = (|y|^2 - 1)^2 / 4``."""

        def loss(y):
            y = _rows(y, n)
            return 0.25 * ((y * y).sum(-1) - 1.0) ** 2

        def grad(y):
            y = _rows(y, n)
            return ((y * y).sum(-1, keepdims=True) - 1.0) * y

        return cls(loss, grad, gamma, beta, n, "double_well", {}, **kw)

    @classmethod
    def zero(cls, gamma=0.5, beta=1.0, n=1, **kw):
        def loss(y):
            return np.zeros(len(_rows(y, n)))

        def grad(y):
            return np.zeros_like(_rows(y, n))

        return cls(loss, grad, gamma, beta, n, "zero", {}, **kw)

    @classmethod
    def named(cls, name, **kw):
        if name not in LOSSES:
            raise ParameterError(f"unknown loss {name!r}; valid: {', '.join(LOSSES)}")
        return getattr(cls, name)(**kw)

    # -- probes -----------------------------------------------------------
    def probe_pairs(self):
        """Sample pairs used for the Lipschitz probe: wide pairs and close pairs."""
        rng = np.random.default_rng(self.seed)
        R = self.probe_radius
        k = self.n_probe_pairs
        y1 = rng.uniform(-R, R, size=(k, self.n))
        y2 = rng.uniform(-R, R, size=(k, self.n))
        y3 = np.clip(y1 + rng.normal(scale=1e-3 * R, size=(k, self.n)), -R, R)
        return np.concatenate([y1, y1]), np.concatenate([y2, y3])

    def probe_lipschitz(self):
        y1, y2 = self.probe_pairs()
        dy = np.linalg.norm(y1 - y2, axis=1)
        ok = dy > 0
        dg = np.linalg.norm(np.asarray(self.grad(y1)) - np.asarray(self.grad(y2)), axis=1)
        if not np.any(ok):
            return 0.0
        return float(np.max(dg[ok] / dy[ok]))

    @property
    def gamma_ok(self):
        """Coupling small enough for the effective limit, gamma < 1/L."""
        return bool(self.lipschitz == 0 or self.gamma < 1.0 / self.lipschitz)

    def potential(self, y, x):
        """Fast potential ``phi(y) + |x - y|^2 / (2 gamma)``."""
        y = _rows(y, self.n)
        x = np.asarray(x, dtype=float)
        return np.asarray(self.loss(y), dtype=float) + ((x - y) ** 2).sum(-1) / (2.0 * self.gamma)

    def model(self, epsilon, horizon, n_controls=33) -> TwoScaleModel:
        """The two-scale system with slow drift ``-u (x - y)/gamma`` and no slow noise."""
        n, gamma, beta = self.n, self.gamma, self.beta
        scale = beta ** -0.5
        eye = scale * np.eye(n)
        spec = self

        def lead(*arrays):
            return np.broadcast_shapes(*(np.shape(a)[:-1] for a in arrays))

        def f(x, y, u):
            x = np.asarray(x, dtype=float)
            y = np.asarray(y, dtype=float)
            u = np.asarray(u, dtype=float)
            return -u[..., :1] * (x - y) / gamma + np.zeros(lead(x, y, u) + (n,))

        def sigma(x, y, u):
            return np.zeros(lead(np.asarray(x), np.asarray(y), np.asarray(u)) + (n, n))

        def sigma_eps(eps, x, y, u):
            return sigma(x, y, u)

        def b(x, y):
            x = np.asarray(x, dtype=float)
            y = np.asarray(y, dtype=float)
            shape = lead(x, y) + (n,)
            flat = np.broadcast_to(y, shape).reshape(-1, n)
            g = np.asarray(spec.grad(flat), dtype=float).reshape(shape)
            return -g + (x - y) / gamma

        def rho(x, y):
            return np.broadcast_to(eye, lead(np.asarray(x), np.asarray(y)) + (n, n)).copy()

        def zero_ell(t, x, y, u):
            return np.zeros(lead(np.asarray(x), np.asarray(y), np.asarray(u)))

        def zero_g(x, y):
            return np.zeros(lead(np.asarray(x), np.asarray(y)))

        def log_density(x, y):
            x = np.asarray(x, dtype=float)
            y = np.asarray(y, dtype=float)
            shape = lead(x, y)
            xf = np.broadcast_to(x, shape + (n,)).reshape(-1, n)
            yf = np.broadcast_to(y, shape + (n,)).reshape(-1, n)
            phi = np.asarray(spec.loss(yf), dtype=float) + ((xf - yf) ** 2).sum(-1) / (2.0 * gamma)
            return (-beta * phi).reshape(shape)

        return TwoScaleModel(
            n=n, m=n, r=n, f=f, sigma_eps=sigma_eps, sigma_limit=sigma, b=b, rho=rho, ell=zero_ell, g=zero_g,
            lam=0.0, control_set=ControlSet.box([0.0], [1.0], n_controls), epsilon=float(epsilon),
            horizon=float(horizon), name="deep_relax", params={"loss": self.name, **self.params},
            fast_log_density=log_density, ell_autonomous=True, rho_constant=True,
        )


# ---------------------------------------------------------------------------
# local entropy


@dataclass
class LocalEntropy:
    value: float
    gradient: np.ndarray
    gradient_gibbs: Optional[np.ndarray]
    gradient_fd: Optional[np.ndarray]
    box_mass: float
    method: str

    def route_gap(self):
        """Largest relative disagreement between the available gradient routes."""
        routes = [g for g in (self.gradient, self.gradient_gibbs, self.gradient_fd) if g is not None]
        return max(_rel_gap(a, b) for a in routes for b in routes)

    def to_dict(self):
        out = {"value": self.value, "gradient": self.gradient.tolist(), "box_mass": self.box_mass,
               "method": self.method}
        out["gradient_gibbs"] = None if self.gradient_gibbs is None else self.gradient_gibbs.tolist()
        out["gradient_fd"] = None if self.gradient_fd is None else self.gradient_fd.tolist()
        return out


def _rel_gap(a, b, floor=1e-6):
    # below the floor the comparison is absolute, which keeps FD roundoff at zero gradients from tripping it
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / scale


def _quadrature(spec, x, quadrature):
    q = dict(quadrature or {})
    nodes = int(q.get("nodes", DEFAULT_NODES))
    sd = math.sqrt(spec.gamma / spec.beta)
    if "box" in q:
        lo, hi = (np.atleast_1d(np.asarray(v, dtype=float)) for v in q["box"])
        if lo.size != spec.n or hi.size != spec.n:
            raise ParameterError("quadrature box has the wrong dimension")
    else:
        c = float(q.get("half_width", DEFAULT_HALF_WIDTH))
        lo, hi = x - c * sd, x + c * sd
    # mass of the Gaussian factor exp(-beta |x - y|^2 / (2 gamma)) inside the box
    s2 = sd * math.sqrt(2.0)
    mass = float(np.prod(0.5 * (erf((hi - x) / s2) - erf((lo - x) / s2))))
    if not mass >= 1.0 - MASS_TOL:
        raise QuadratureError(f"quadrature box holds only {mass!r} of the Gaussian mass around x")
    return lo, hi, nodes, mass


def _log_terms(spec, x, y, logw):
    """Log of the integrand of the kernel convolution at nodes ``y``."""
    n, gamma, beta = spec.n, spec.gamma, spec.beta
    log_kernel = -0.5 * n * math.log(2.0 * math.pi * gamma) - beta * ((x - y) ** 2).sum(-1) / (2.0 * gamma)
    return logw + log_kernel - beta * np.asarray(spec.loss(y), dtype=float)


def _value_quad(spec, x, quadrature):
    lo, hi, nodes, mass = _quadrature(spec, x, quadrature)
    y, w = tensor_gauss_legendre(lo, hi, nodes)
    lt = _log_terms(spec, x, y, np.log(w))
    log_z = logsumexp(lt)
    weights = np.exp(lt - log_z)
    # differentiated integrand: grad_x log Z = -beta/gamma * E[x - y]
    grad = (weights[:, None] * (x - y)).sum(0) / spec.gamma
    return -log_z / spec.beta, grad, mass


def _value_mc(spec, x, seed, n_samples=MC_SAMPLES):
    """Importance sampling from the Gaussian factor, common random numbers across x."""
    n, gamma, beta = spec.n, spec.gamma, spec.beta
    sd = math.sqrt(gamma / beta)
    z = CounterNoise(seed).normals(np.arange(n_samples, dtype=np.int64), 0, 1, n)[0]
    y = x + sd * z
    le = -beta * np.asarray(spec.loss(y), dtype=float)
    log_mean = logsumexp(le) - math.log(n_samples)
    # kernel mass (2 pi gamma)^(-n/2) (2 pi gamma / beta)^(n/2) = beta^(-n/2)
    log_z = -0.5 * n * math.log(beta) + log_mean
    weights = np.exp(le - logsumexp(le))
    # pathwise derivative of the sampled value: the kernel moves with x, so grad = E_w[grad phi(y)]
    grad = (weights[:, None] * _rows(spec.grad(y), n)).sum(0)
    return -log_z / beta, grad, 1.0


def _gibbs_mean_gradient(spec, x):
    rule = gibbs_rule(lambda y: spec.potential(y, x), spec.beta, spec.n, None, DEFAULT_NODES)
    mean = np.atleast_1d(rule.expect(lambda y: y))
    return (x - mean) / spec.gamma


def local_entropy(spec: RelaxationSpec, x, quadrature=None, check=True, fd_step=1e-4, seed=0) -> LocalEntropy:
    """Value and gradient of ``-(1/beta) log(G * exp(-beta phi))(x)``.

    The kernel is ``(2 pi gamma)^(-n/2) exp(-beta |x|^2 / (2 gamma))`` exactly as
    written; for beta != 1 it does not have unit mass, which shifts the value by
    a constant and leaves the gradient unchanged.

    ``quadrature`` may hold ``nodes`` (default 257) and either ``half_width`` in
    Gaussian standard deviations ``sqrt(gamma/beta)`` (default 8) or an explicit
    ``box = (lo, hi)``. Dimensions above 2 use Monte Carlo with 10^6 samples.

    With ``check`` the gradient is also computed from the Gibbs mean of the fast
    potential (independent quadrature) and by central differences of the value;
    disagreement beyond 1e-4 relative raises :class:`QuadratureError`.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (spec.n,):
        raise ParameterError("x has the wrong dimension")
    if spec.n <= 2:
        method = "gauss-legendre"

        def value_fn(z):
            return _value_quad(spec, z, quadrature)
    else:
        method = "monte-carlo"

        def value_fn(z):
            return _value_mc(spec, z, seed)

    value, grad, mass = value_fn(x)
    g_gibbs = g_fd = None
    if check:
        g_fd = np.empty(spec.n)
        for a in range(spec.n):
            d = np.zeros(spec.n)
            d[a] = fd_step
            g_fd[a] = (value_fn(x + d)[0] - value_fn(x - d)[0]) / (2.0 * fd_step)
        if spec.n <= 2:
            g_gibbs = _gibbs_mean_gradient(spec, x)
    out = LocalEntropy(float(value), grad, g_gibbs, g_fd, mass, method)
    if check:
        gap = out.route_gap()
        if not gap <= ROUTE_TOL:
            raise QuadratureError(f"gradient routes disagree by {gap!r} relative at x={x.tolist()}")
    return out


# ---------------------------------------------------------------------------
# dynamics


def _learning_rate_policy(model, policy):
    cs = model.control_set
    if policy is None:
        return ControlPolicy.constant(cs, [1.0], "u=1")
    if isinstance(policy, ControlPolicy):
        return policy
    if callable(policy):
        def fn(t, x, y):
            return np.reshape(np.asarray(policy(t, x, y), dtype=float), (-1, 1))

        return ControlPolicy.feedback(cs, fn, "feedback")
    u = float(policy)
    if not 0.0 <= u <= 1.0:
        raise ParameterError("learning rate must lie in [0, 1]")
    return ControlPolicy.constant(cs, [u])


def run_deep_relaxation(spec: RelaxationSpec, epsilon, x0, y0, T, dt, learning_rate_policy=None, n_paths=1,
                        seed=0, workers=1, record_every=1, keep_fast=True) -> PathEnsemble:
    """Simulate the two-scale relaxation dynamics.

    ``learning_rate_policy`` is a constant in [0, 1], a map ``(t, x, y) -> u``
    or a :class:`ControlPolicy`; the default is u = 1. Requires dt <= epsilon/10.
    """
    if not T > 0:
        raise ParameterError("T > 0 required")
    model = spec.model(epsilon, T)
    policy = _learning_rate_policy(model, learning_rate_policy)
    return simulate_path_ensemble(model, policy, x0, y0, dt, n_paths, seed, workers=workers,
                                  record_every=record_every, keep_fast=keep_fast)


@dataclass
class DescentPath:
    t: np.ndarray
    x: np.ndarray
    phi_gamma: np.ndarray

    def to_csv(self, target=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.x.shape[1]
        w.writerow(["t"] + (["x"] if n == 1 else [f"x_{i + 1}" for i in range(n)]) + ["phi_gamma"])
        for t, x, v in zip(self.t, self.x, self.phi_gamma):
            w.writerow([format(t, ".17g")] + [format(c, ".17g") for c in x] + [format(v, ".17g")])
        text = buf.getvalue()
        if target is not None:
            with open(target, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def run_effective_descent(spec: RelaxationSpec, x0, T, dt, quadrature=None, check=True) -> DescentPath:
    """Explicit Euler for ``dx = -grad phi_gamma(x) dt`` on ``[0, T]``."""
    if not spec.gamma_ok:
        raise ParameterError(f"gamma < 1/L violated (gamma={spec.gamma!r}, L={spec.lipschitz!r})")
    if T < 0 or not dt > 0:
        raise ParameterError("T >= 0 and dt > 0 required")
    n_steps = int(round(T / dt)) if T > 0 else 0
    if n_steps and abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ParameterError("T must be an integer multiple of dt")
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    xs, vals = [x.copy()], []
    for _ in range(n_steps):
        le = local_entropy(spec, x, quadrature, check=check)
        vals.append(le.value)
        x = x - dt * le.gradient
        xs.append(x.copy())
    vals.append(local_entropy(spec, x, quadrature, check=False).value)
    return DescentPath(np.arange(n_steps + 1) * dt, np.array(xs), np.array(vals))


@dataclass
class GapStudy:
    epsilons: list
    sup_gap: list
    se: list
    final_gap: list
    final_se: list
    times: np.ndarray
    gap_profiles: list
    strictly_decreasing: bool
    significant: bool
    verdict: str

    def to_csv(self, target=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epsilon", "sup_gap", "se"])
        for e, g, s in zip(self.epsilons, self.sup_gap, self.se):
            w.writerow([format(e, ".17g"), format(g, ".17g"), format(s, ".17g")])
        text = buf.getvalue()
        if target is not None:
            with open(target, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    def to_dict(self):
        return {
            "epsilons": self.epsilons, "sup_gap": self.sup_gap, "se": self.se, "final_gap": self.final_gap,
            "final_se": self.final_se, "strictly_decreasing": self.strictly_decreasing,
            "significant": self.significant, "verdict": self.verdict,
        }


def trajectory_gap_study(spec: RelaxationSpec, epsilon_list, x0, y0, T, dt, n_paths, seed=0, quadrature=None,
                         workers=1) -> GapStudy:
    """Sup-in-time gap between the ensemble-mean slow path (u = 1) and the effective descent.

    ``significant`` records whether each successive decrease exceeds three
    combined standard errors.
    """
    eps = [float(e) for e in epsilon_list]
    if not eps or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ParameterError("epsilon_list must be strictly decreasing")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if T == 0:
        zeros = [0.0] * len(eps)
        return GapStudy(eps, zeros, zeros, zeros, zeros, np.zeros(1), [np.zeros(1) for _ in eps], False, False,
                        "pass")
    eff = run_effective_descent(spec, x0, T, dt, quadrature, check=False)
    sup, ses, fin, fin_se, profiles = [], [], [], [], []
    for e in eps:
        ens = run_deep_relaxation(spec, e, x0, y0, T, dt, None, n_paths, seed, workers, keep_fast=False)
        mean, se = ens.mean_x()
        gap = np.linalg.norm(mean - eff.x, axis=1)
        se_n = np.linalg.norm(se, axis=1)
        k = int(np.argmax(gap))
        sup.append(float(gap[k]))
        ses.append(float(se_n[k]))
        fin.append(float(gap[-1]))
        fin_se.append(float(se_n[-1]))
        profiles.append(gap)
    decreasing = all(b < a for a, b in zip(sup, sup[1:]))
    significant = all(a - b > 3.0 * math.hypot(sa, sb) for a, b, sa, sb in zip(sup, sup[1:], ses, ses[1:]))
    small = fin[-1] <= max(0.02 * float(np.linalg.norm(x0)), 3.0 * fin_se[-1])
    verdict = "pass" if decreasing and small else "fail"
    return GapStudy(eps, sup, ses, fin, fin_se, eff.t, profiles, decreasing, significant, verdict)
