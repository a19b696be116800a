"""Tensorized Gauss-Legendre quadrature on parameter boxes.

Nodes and weights live on [0, 1]; per-direction weights sum to one, so a
tensor rule integrates against the normalized box measure and element
integrals are scaled by the box volume.
"""

import itertools

import numpy as np

__all__ = ["GaussRule", "gauss_rule", "integrate_element"]

_cache = {}


def _legendre_nodes(n):
    """Gauss-Legendre nodes/weights on [-1, 1] by Newton iteration on P_n."""
    k = np.arange(1, n + 1)
    x = np.cos(np.pi * (k - 0.25) / (n + 0.5))
    for _ in range(100):
        p0 = np.ones_like(x)
        p1 = x.copy()
        for j in range(2, n + 1):
            p0, p1 = p1, ((2 * j - 1) * x * p1 - (j - 1) * p0) / j
        dp = n * (x * p1 - p0) / (x * x - 1.0)
        dx = p1 / dp
        x -= dx
        if np.max(np.abs(dx)) < 1e-16:
            break
    p0 = np.ones_like(x)
    p1 = x.copy()
    for j in range(2, n + 1):
        p0, p1 = p1, ((2 * j - 1) * x * p1 - (j - 1) * p0) / j
    dp = n * (x * p1 - p0) / (x * x - 1.0)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    order = np.argsort(x)
    return x[order], w[order]


class GaussRule:
    """Tensor Gauss-Legendre rule: ``npoints`` nodes per direction on [0, 1].

    Attributes
    ----------
    nodes1d, weights1d : np.ndarray
        Univariate nodes and weights on [0, 1]; weights sum to 1.
    points : np.ndarray, shape (npoints**dim, dim)
    weights : np.ndarray, shape (npoints**dim,)
    """

    def __init__(self, npoints, dim):
        if not 1 <= npoints <= 30:
            raise ValueError(f"points per direction must be in [1, 30], got {npoints}")
        self.npoints = npoints
        self.dim = dim
        x, w = _legendre_nodes(npoints)
        self.nodes1d = 0.5 * (x + 1.0)
        self.weights1d = 0.5 * w
        grids = list(itertools.product(*([range(npoints)] * dim)))
        self.points = np.array([[self.nodes1d[i] for i in g] for g in grids])
        self.weights = np.array([np.prod([self.weights1d[i] for i in g]) for g in grids])

    def points_in_box(self, box):
        """Mapped points and weights for a (dim, 2) parameter box.

        Weights include the box volume, so summing ``w * f`` integrates f
        over the box in parameter measure.
        """
        box = np.asarray(box, dtype=float)
        lo, hi = box[:, 0], box[:, 1]
        pts = lo + self.points * (hi - lo)
        vol = np.prod(hi - lo)
        return pts, self.weights * vol


def gauss_rule(npoints, dim):
    """Cached tensor Gauss rule with ``npoints`` nodes per direction."""
    key = (npoints, dim)
    if key not in _cache:
        _cache[key] = GaussRule(npoints, dim)
    return _cache[key]


def integrate_element(f, elem, rule):
    """Integrate a physical-space integrand over one mapped element.

    ``f(x, data)`` receives the physical quadrature points ``x`` of shape
    (nq, D) and the element's geometry ``data`` and returns values of shape
    (nq,).  ``elem`` must provide ``box`` (parameter bounds) and a geometry
    map ``geo``.
    """
    pts, w = rule.points_in_box(elem.box)
    data = elem.geo.eval(pts, nderiv=1)
    vals = f(data.x, data)
    return float(np.sum(w * vals * np.abs(data.det)))
