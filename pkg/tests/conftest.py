"""Shared helpers for the test suite."""

import numpy as np

from spacetime_iga.hierarchical import HierarchicalSplineSpace
from spacetime_iga.splines import KnotVector


def uniform_kv(p, nspans):
    interior = np.linspace(0.0, 1.0, nspans + 1)[1:-1]
    knots = np.concatenate([[0.0] * (p + 1), interior, [1.0] * (p + 1)])
    return KnotVector(knots, p)


def thb_space(p, nspans, dim):
    return HierarchicalSplineSpace.from_knots([uniform_kv(p, nspans)] * dim)


def eval_discrete(space, coeffs, pts):
    """Values of a discrete function at parameter points."""
    from spacetime_iga.hierarchical import eval_active

    out = np.empty(len(pts))
    for i, pt in enumerate(pts):
        gidx, vals, _, _ = eval_active(space, pt)
        out[i] = vals @ coeffs[gidx]
    return out
