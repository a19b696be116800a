"""Manufactured benchmark problems on the benchmark patches.

Every case supplies the exact solution with closed-form derivatives, the
matching source, the boundary/initial trace and the Friedrichs constant of
its spatial domain.  Callbacks take parameter points of shape (n, D) plus
the geometry map; precomputed geometry data may be passed to avoid
re-evaluating the map.

The quarter-annulus case states its solution in parameter coordinates
composed with the patch map (it vanishes on the whole lateral boundary);
its physical derivatives and source follow from the chain rule through the
map, so the source is consistent with the PDE by construction.
"""

import numpy as np

from .estimators import friedrichs_constant
from .geometry import benchmark_patch, phys_gradients, spatial_laplacian

__all__ = ["ProblemCase", "example_case", "EXAMPLE_IDS"]

EXAMPLE_IDS = ("ex1", "ex2", "ex3", "ex4", "ex5")


class ProblemCase:
    """A manufactured problem: geometry id, exact data and source."""

    def __init__(self, case_id, patch_id, final_time, exact, source, boundary,
                 u0_grad, params=None):
        self.id = case_id
        self.patch_id = patch_id
        self.T = float(final_time)
        self.exact = exact
        self.source = source
        self.boundary = boundary
        self.u0_grad = u0_grad
        self.params = dict(params or {})
        self.C_F = friedrichs_constant(patch_id)

    @property
    def d(self):
        return 2 if self.patch_id in ("unit_square_time", "quarter_annulus_time") else 1

    def make_patch(self):
        return benchmark_patch(self.patch_id, self.T)

    def validate(self, geo, npoints=1000, seed=0, tol=1e-8):
        """Check f = dt u - lap_x u by sampling random interior points."""
        rng = np.random.default_rng(seed)
        xi = rng.uniform(0.02, 0.98, (npoints, geo.dim))
        ex = self.exact(xi, geo)
        f = self.source(xi, geo)
        resid = np.abs(f - (ex["ut"] - ex["lap"]))
        scale = 1.0 + np.abs(f)
        if np.any(resid > tol * scale):
            raise AssertionError(
                f"source of {self.id} inconsistent with the PDE "
                f"(max rel resid {np.max(resid / scale):.2e})"
            )
        return True


def _phys(xi, geo, gdata):
    if gdata is not None:
        return gdata.x
    x = np.array(xi, dtype=float, copy=True)
    x[:, -1] *= geo.T
    return x


def _ex1():
    def fields(xi, geo, gdata=None):
        X = _phys(xi, geo, gdata)
        x, t = X[:, 0], X[:, 1]
        u = (1 - x) * x**2 * (1 - t) * t
        gx = (2 * x - 3 * x**2) * (1 - t) * t
        ut = (1 - x) * x**2 * (1 - 2 * t)
        lap = (2 - 6 * x) * (1 - t) * t
        return {"u": u, "gx": gx[:, None], "ut": ut, "lap": lap}

    def source(xi, geo, gdata=None):
        ex = fields(xi, geo, gdata)
        return ex["ut"] - ex["lap"]

    def boundary(xi, geo):
        return np.zeros(len(xi))

    def u0_grad(xi, geo, gdata=None):
        return np.zeros((len(xi), 1))

    return ProblemCase("ex1", "unit_interval_time", 1.0, fields, source,
                       boundary, u0_grad)


def _ex2(k1=1, k2=1):
    k1 = int(k1)
    k2 = int(k2)

    def fields(xi, geo, gdata=None):
        X = _phys(xi, geo, gdata)
        x, t = X[:, 0], X[:, 1]
        sx = np.sin(k1 * np.pi * x)
        st = np.sin(k2 * np.pi * t)
        u = sx * st
        gx = k1 * np.pi * np.cos(k1 * np.pi * x) * st
        ut = k2 * np.pi * sx * np.cos(k2 * np.pi * t)
        lap = -((k1 * np.pi) ** 2) * u
        return {"u": u, "gx": gx[:, None], "ut": ut, "lap": lap}

    def source(xi, geo, gdata=None):
        X = _phys(xi, geo, gdata)
        x, t = X[:, 0], X[:, 1]
        return np.sin(k1 * np.pi * x) * (
            k2 * np.pi * np.cos(k2 * np.pi * t)
            + (k1 * np.pi) ** 2 * np.sin(k2 * np.pi * t)
        )

    def boundary(xi, geo):
        return np.zeros(len(xi))

    def u0_grad(xi, geo, gdata=None):
        X = _phys(xi, geo, gdata)
        return (k1 * np.pi * np.cos(k1 * np.pi * X[:, 0]) * 0.0)[:, None]

    return ProblemCase("ex2", "unit_interval_time", 1.0, fields, source,
                       boundary, u0_grad, params={"k1": k1, "k2": k2})


def _ex3():
    a, b, alpha = 0.8, 0.05, 100.0

    def pieces(x, t):
        r = np.maximum(np.sqrt((x - a) ** 2 + (t - b) ** 2), 1e-12)
        E = np.exp(-alpha * r)
        rx = (x - a) / r
        rt = (t - b) / r
        return r, E, rx, rt

    def fields(xi, geo, gdata=None):
        X = _phys(xi, geo, gdata)
        x, t = X[:, 0], X[:, 1]
        r, E, rx, rt = pieces(x, t)
        g = x**2 - x
        dg = 2 * x - 1
        s = t**2 - t
        ds = 2 * t - 1
        u = g * s * E
        gx = s * E * (dg - alpha * g * rx)
        ut = g * E * (ds - alpha * s * rt)
        drx = 1.0 / r - (x - a) ** 2 / r**3
        lap = s * E * (
            2.0 - 2 * alpha * dg * rx + alpha**2 * g * rx**2 - alpha * g * drx
        )
        return {"u": u, "gx": gx[:, None], "ut": ut, "lap": lap}

    def source(xi, geo, gdata=None):
        ex = fields(xi, geo, gdata)
        return ex["ut"] - ex["lap"]

    def boundary(xi, geo):
        return np.zeros(len(xi))

    def u0_grad(xi, geo, gdata=None):
        return np.zeros((len(xi), 1))

    return ProblemCase("ex3", "unit_interval_time", 1.0, fields, source,
                       boundary, u0_grad, params={"peak": (a, b)})


def _ex4(lam=0.5):
    lam = float(lam)
    if lam <= 0:
        raise ValueError("the time-singularity exponent must be positive")

    def tpart(t):
        s = np.sign(1.0 - t)
        m = np.maximum(np.abs(1.0 - t), 1e-300)
        return s * m**lam, -lam * m ** (lam - 1.0)

    def fields(xi, geo, gdata=None):
        X = _phys(xi, geo, gdata)
        x, t = X[:, 0], X[:, 1]
        w, dw = tpart(t)
        sx = np.sin(np.pi * x)
        u = sx * w
        gx = np.pi * np.cos(np.pi * x) * w
        ut = sx * dw
        lap = -(np.pi**2) * u
        return {"u": u, "gx": gx[:, None], "ut": ut, "lap": lap}

    def source(xi, geo, gdata=None):
        ex = fields(xi, geo, gdata)
        return ex["ut"] - ex["lap"]

    def boundary(xi, geo):
        ex = fields(xi, geo, None)
        return ex["u"]

    def u0_grad(xi, geo, gdata=None):
        X = _phys(xi, geo, gdata)
        return (np.pi * np.cos(np.pi * X[:, 0]))[:, None]

    return ProblemCase("ex4", "unit_interval_time", 2.0, fields, source,
                       boundary, u0_grad, params={"lam": lam})


def _ex5():
    # parameter-composed polynomial: vanishes on the whole lateral boundary
    def g(s):
        return (1 - s) * s**2, 2 * s - 3 * s**2, 2 - 6 * s

    def ht(s):
        return (1 - s) * s**2, 2 * s - 3 * s**2, 2 - 6 * s

    def param_derivs(xi):
        g1, dg1, d2g1 = g(xi[:, 0])
        g2, dg2, d2g2 = g(xi[:, 1])
        g3, dg3, d2g3 = ht(xi[:, 2])
        u = g1 * g2 * g3
        grad = np.stack([dg1 * g2 * g3, g1 * dg2 * g3, g1 * g2 * dg3], axis=1)
        hess = np.empty((len(xi), 3, 3))
        hess[:, 0, 0] = d2g1 * g2 * g3
        hess[:, 1, 1] = g1 * d2g2 * g3
        hess[:, 2, 2] = g1 * g2 * d2g3
        hess[:, 0, 1] = hess[:, 1, 0] = dg1 * dg2 * g3
        hess[:, 0, 2] = hess[:, 2, 0] = dg1 * g2 * dg3
        hess[:, 1, 2] = hess[:, 2, 1] = g1 * dg2 * dg3
        return u, grad, hess

    def fields(xi, geo, gdata=None):
        if gdata is None or gdata.sec is None:
            gdata = geo.eval(np.atleast_2d(xi), nderiv=2)
        u, grad, hess = param_derivs(np.atleast_2d(xi))
        gp = phys_gradients(gdata, grad[:, :, None])
        lap = spatial_laplacian(gdata, gp, hess[:, :, :, None])
        return {
            "u": u,
            "gx": gp[:, :2, 0],
            "ut": gp[:, 2, 0],
            "lap": lap[:, 0],
        }

    def source(xi, geo, gdata=None):
        ex = fields(xi, geo, gdata)
        return ex["ut"] - ex["lap"]

    def boundary(xi, geo):
        return np.zeros(len(xi))

    def u0_grad(xi, geo, gdata=None):
        return np.zeros((len(xi), 2))

    return ProblemCase("ex5", "quarter_annulus_time", 1.0, fields, source,
                       boundary, u0_grad)


def example_case(case_id, **params):
    """Benchmark case by id; ex2 takes k1/k2, ex4 takes lam."""
    if case_id == "ex1":
        return _ex1()
    if case_id == "ex2":
        return _ex2(**params)
    if case_id == "ex3":
        return _ex3()
    if case_id == "ex4":
        return _ex4(**params)
    if case_id == "ex5":
        return _ex5()
    raise ValueError(f"unknown example {case_id!r}")
