"""Regenerate the frozen reference values in ``derived.json``.

Uses mpmath quadrature and ODE solvers only, nothing from the package, so the
numbers are an independent check on the implementation. Run from the repo root::

    python3 tests/oracles/generate.py
"""

import json
import os

import mpmath as mp

mp.mp.dps = 30


def gauss_pdf(y, mean, var):
    return mp.exp(-(y - mean) ** 2 / (2 * var)) / mp.sqrt(2 * mp.pi * var)


def lq_hbar(x, p, q, gamma, beta):
    """E over the Gibbs law of min over u in [0, 1] of u (x - y) p / gamma."""
    mean = x / (1 + q * gamma)
    var = 1 / (beta * (q + 1 / gamma))
    f = lambda y: min(0, (x - y) * p / gamma) * gauss_pdf(y, mean, var)
    return mp.quad(f, [-mp.inf, x, mp.inf])


def local_entropy_grad(grad_kind, x, gamma, beta, q=1.0):
    """Gradient of -(1/beta) log of the kernel convolution, by high-precision quadrature."""
    if grad_kind == "quadratic":
        phi = lambda y: q * y * y / 2
    else:
        phi = lambda y: (y * y - 1) ** 2 / 4
    w = lambda y: mp.exp(-beta * (x - y) ** 2 / (2 * gamma) - beta * phi(y))
    sd = mp.sqrt(gamma / beta)
    pts = [x - 40 * sd, x, x + 40 * sd]
    z = mp.quad(w, pts)
    m1 = mp.quad(lambda y: (x - y) * w(y), pts)
    return m1 / z / gamma


def barrier_bvp(n, R, eta, gamma, zs):
    """Shoot the linear ODE phi'' = eta phi' + gamma phi from phi(R) = 1, phi'(R) = 0 and rescale."""
    sol = mp.odefun(lambda z, v: [v[1], eta * v[1] + gamma * v[0]], R, [mp.mpf(1), mp.mpf(0)])
    end = sol(n)[0]
    return [sol(z)[0] / end for z in zs]


def ou_tv(mean, var):
    """Total variation between N(mean, var) and N(0, 1)."""
    f = lambda y: abs(gauss_pdf(y, mean, var) - gauss_pdf(y, 0, 1))
    return mp.quad(f, [-mp.inf, -3, 0, 3, mp.inf]) / 2


def main():
    out = {}
    out["lq_hbar"] = [
        {"x": x, "p": p, "q": 1.0, "gamma": 0.5, "beta": 1.0, "value": float(lq_hbar(x, p, 1.0, 0.5, 1.0))}
        for x in (-1.0, 0.0, 0.5, 1.0, 2.0) for p in (-1.5, -0.5, 0.5, 1.0, 2.0)
    ]
    out["local_entropy_grad"] = [
        {"loss": kind, "x": x, "gamma": g, "beta": b, "value": float(local_entropy_grad(kind, x, g, b))}
        for kind, g, b in (("quadratic", 0.5, 1.0), ("quadratic", 0.3, 4.0), ("double_well", 0.05, 1.0),
                           ("double_well", 0.2, 2.0))
        for x in (-1.7, -0.4, 0.0, 0.3, 1.0, 2.0)
    ]
    zs = [1.0 + 4.0 * k / 10 for k in range(11)]
    out["barrier"] = [{"n": 5.0, "R": 1.0, "eta": 0.5, "gamma": 0.1, "z": zs,
                       "value": [float(v) for v in barrier_bvp(5.0, 1.0, 0.5, 0.1, zs)]},
                      {"n": 3.0, "R": 0.5, "eta": 2.0, "gamma": 1.5, "z": [0.5, 1.0, 2.0, 3.0],
                       "value": [float(v) for v in barrier_bvp(3.0, 0.5, 2.0, 1.5, [0.5, 1.0, 2.0, 3.0])]}]
    out["ou_tv_from_2"] = [{"t": t, "value": float(ou_tv(2 * mp.exp(-t), 1 - mp.exp(-2 * t)))}
                           for t in (0.5, 1.0, 2.0, 4.0)]
    out["laplace_drift_free"] = [{"n": n, "delta": d, "rho_bar": 1.0, "value": float(1 / mp.cosh(n * mp.sqrt(d)))}
                                 for n in (2.0, 4.0) for d in (0.05, 0.1)]
    here = os.path.dirname(os.path.abspath(__file__))
    with open(os.path.join(here, "derived.json"), "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=1)
        fh.write("\n")


if __name__ == "__main__":
    main()
