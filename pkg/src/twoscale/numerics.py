"""Small numerical helpers: deterministic reductions and quadrature rules."""

import numpy as np


def tree_sum(values, axis=0):
    """Pairwise (tree) summation along ``axis`` in index order.

    The reduction order depends only on the length of the axis, so results do
    not change with how the values were produced or chunked.
    """
    a = np.moveaxis(np.asarray(values, dtype=np.float64), axis, 0)
    if a.shape[0] == 0:
        return np.zeros(a.shape[1:])
    while a.shape[0] > 1:
        if a.shape[0] % 2:
            head = a[:-1:2] + a[1::2]
            a = np.concatenate([head, a[-1:]], axis=0)
        else:
            a = a[0::2] + a[1::2]
    return a[0]


def tree_mean(values, axis=0):
    a = np.asarray(values, dtype=np.float64)
    return tree_sum(a, axis=axis) / a.shape[axis]


def mean_and_se(values):
    """Sample mean and its standard error, both by tree summation."""
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[0]
    mean = tree_mean(v)
    if n < 2:
        return mean, np.zeros_like(mean)
    var = tree_sum((v - mean) ** 2) / (n - 1)
    return mean, np.sqrt(var / n)


def gauss_legendre(lo, hi, n_nodes):
    """Gauss-Legendre nodes and weights on ``[lo, hi]``."""
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), half * w


def tensor_gauss_legendre(lo, hi, n_nodes):
    """Tensor-product rule on a box; returns nodes ``(N, d)`` and weights ``(N,)``."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    rules = [gauss_legendre(a, b, n_nodes) for a, b in zip(lo, hi)]
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    return nodes, weights


def linear_fit(x, y):
    """Least-squares line; returns ``(slope, intercept, r_squared)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def aitken_limit(seq):
    """Geometric-sequence (Aitken delta-squared) extrapolation of the last three terms.

    Returns ``None`` when the last three terms do not look like a convergent
    geometric sequence (ratio outside (0, 1) or a vanishing denominator).
    """
    if len(seq) < 3:
        return None
    s0, s1, s2 = (float(v) for v in seq[-3:])
    d1, d2 = s1 - s0, s2 - s1
    if d1 == 0.0:
        return None
    ratio = d2 / d1
    if not 0.0 < ratio < 1.0:
        return None
    return s2 + d2 * ratio / (1.0 - ratio)
