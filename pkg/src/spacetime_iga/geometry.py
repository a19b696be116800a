"""NURBS geometry maps from the parameter cube to the space-time cylinder.

The time direction is always the last coordinate and is mapped affinely to
(0, T) in every benchmark patch, so the initial/terminal slices are the
parameter faces tau = 0 and tau = 1.  All integrals are pulled back to the
parameter domain; the inverse map is never formed.
"""

import itertools

import numpy as np

from .quadrature import gauss_rule
from .splines import KnotVector, TensorSplineSpace, eval_univariate

__all__ = [
    "GeometryError",
    "GeometryMap",
    "GeometryData",
    "MappedElement",
    "map_and_jacobian",
    "element_size",
    "benchmark_patch",
    "phys_gradients",
    "spatial_laplacian",
]

_DET_TOL = 1e-14


class GeometryError(RuntimeError):
    """Raised when the geometry map degenerates (singular Jacobian)."""


class GeometryData:
    """Geometry quantities at a batch of parameter points.

    Attributes
    ----------
    x : (nq, D) physical points
    J : (nq, D, D) Jacobian dx/dxi (rows: physical, cols: parametric)
    det, Jinv : determinants and inverses (nderiv >= 1)
    sec : (nq, D, D, D) second derivatives d2x_m / dxi_i dxi_j (nderiv == 2)
    """

    def __init__(self, x, J=None, sec=None):
        self.x = x
        self.J = J
        self.sec = sec
        if J is not None:
            self.det = np.linalg.det(J)
            if np.any(np.abs(self.det) < _DET_TOL):
                raise GeometryError("geometry map is singular at a quadrature point")
            self.Jinv = np.linalg.inv(J)
        else:
            self.det = self.Jinv = None

    def spatial_metric(self):
        """S[q, i, j] = sum over spatial axes a of Jinv[i, a] Jinv[j, a]."""
        d = self.x.shape[1] - 1
        W = self.Jinv[:, :, :d]
        return np.einsum("qia,qja->qij", W, W)


def phys_gradients(data, grad_param):
    """Physical gradients from parametric ones: (nq, D, n) -> (nq, D, n)."""
    return np.einsum("qia,qin->qan", data.Jinv, grad_param)


def spatial_laplacian(data, grad_phys, hess_param):
    """Spatial Laplacian of pulled-back functions at the data's points.

    ``grad_phys`` is the full physical gradient (time component included),
    ``hess_param`` the parametric Hessian of shape (nq, D, D, n).
    """
    S = data.spatial_metric()
    lap = np.einsum("qijn,qij->qn", hess_param, S)
    if data.sec is not None:
        tau = np.einsum("qmij,qij->qm", data.sec, S)
        lap -= np.einsum("qmn,qm->qn", grad_phys, tau)
    return lap


class GeometryMap:
    """Single-patch NURBS map of the closed parameter cube.

    Attributes
    ----------
    space : TensorSplineSpace of the geometry degrees
    control_points : (ndof, D) array, C-ordered over the control lattice
    weights : (ndof,) positive NURBS weights
    T : final time (the affine image of tau = 1)
    """

    def __init__(self, space, control_points, weights, final_time=1.0):
        control_points = np.asarray(control_points, dtype=float)
        weights = np.asarray(weights, dtype=float)
        if np.any(weights <= 0):
            raise GeometryError("NURBS weights must be positive")
        if control_points.shape != (space.ndof, space.dim):
            raise GeometryError("control net does not match the geometry space")
        self.space = space
        self.dim = space.dim
        self.control_points = control_points
        self.weights = weights
        self.T = float(final_time)
        if any(kv.nspans != 1 for kv in space.kvs):
            raise GeometryError("benchmark geometry must be single-span per direction")
        self._is_affine = bool(
            np.all(weights == weights[0]) and all(kv.degree == 1 for kv in space.kvs)
        )

    def _univariate_grid(self, coords1d, nderiv):
        return [
            np.stack(
                [eval_univariate(kv, float(x), nderiv, span=kv.degree)[1] for x in c]
            )
            for kv, c in zip(self.space.kvs, coords1d)
        ]

    def _combine(self, U, orders):
        acc = None
        for a in range(self.dim):
            cur = U[a][:, orders[a], :]
            if acc is None:
                acc = cur
            else:
                acc = acc[:, None, :, None] * cur[None, :, None, :]
                acc = acc.reshape(acc.shape[0] * acc.shape[1], -1)
        return acc

    def eval_grid(self, coords1d, nderiv=1):
        """Geometry data on the tensor grid of per-direction coordinates."""
        D = self.dim
        U = self._univariate_grid(coords1d, nderiv)
        wP = self.weights[:, None] * self.control_points

        def homo(orders):
            V = self._combine(U, orders)
            return V @ wP, V @ self.weights

        A, W = homo((0,) * D)
        x = A / W[:, None]
        if nderiv == 0:
            return GeometryData(x)
        nq = x.shape[0]
        J = np.empty((nq, D, D))
        dA = np.empty((nq, D, D))
        dW = np.empty((nq, D))
        for i in range(D):
            orders = tuple(1 if a == i else 0 for a in range(D))
            Ai, Wi = homo(orders)
            dA[:, :, i] = Ai
            dW[:, i] = Wi
            J[:, :, i] = (Ai - x * Wi[:, None]) / W[:, None]
        sec = None
        if nderiv >= 2:
            sec = np.empty((nq, D, D, D))
            for i in range(D):
                for j in range(i, D):
                    orders = tuple((a == i) + (a == j) for a in range(D))
                    Aij, Wij = homo(orders)
                    val = (
                        Aij
                        - x * Wij[:, None]
                        - J[:, :, i] * dW[:, j, None]
                        - J[:, :, j] * dW[:, i, None]
                    ) / W[:, None]
                    sec[:, :, i, j] = val
                    sec[:, :, j, i] = val
        return GeometryData(x, J, sec)

    def eval(self, points, nderiv=1):
        """Geometry data at scattered parameter points (nq, D)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        # single-span patches: evaluate per point through degenerate grids
        datas = [self.eval_grid([np.array([c]) for c in pt], nderiv) for pt in points]
        x = np.vstack([d.x for d in datas])
        if nderiv == 0:
            return GeometryData(x)
        J = np.vstack([d.J for d in datas])
        sec = np.vstack([d.sec for d in datas]) if nderiv >= 2 else None
        return GeometryData(x, J, sec)


class MappedElement:
    """A parameter box together with its geometry map and local size."""

    def __init__(self, geo, box, level=None, cell=None):
        self.geo = geo
        self.box = np.asarray(box, dtype=float)
        self.level = level
        self.cell = cell
        self._h = None

    @property
    def h(self):
        if self._h is None:
            self._h = element_size(self.geo, self.box)
        return self._h


def map_and_jacobian(geo, point):
    """Physical image and Jacobian at one parameter point."""
    data = geo.eval(np.asarray(point, dtype=float)[None, :], nderiv=1)
    return data.x[0], data.J[0]


def element_size(geo, box, nsample=3):
    """Local size h_K: sup-norm of the spatial Jacobian rows times diam(K-hat).

    The sup is approximated over a Gauss grid plus the box corners.
    """
    box = np.asarray(box, dtype=float)
    D = geo.dim
    d = D - 1
    rule = gauss_rule(nsample, 1)
    coords = [
        np.concatenate([[box[a, 0]], box[a, 0] + rule.nodes1d * (box[a, 1] - box[a, 0]),
                        [box[a, 1]]])
        for a in range(D)
    ]
    data = geo.eval_grid(coords, nderiv=1)
    spatial_rows = data.J[:, :d, :]
    opnorm = max(np.linalg.norm(M, ord=2) for M in spatial_rows)
    diam = float(np.linalg.norm(box[:, 1] - box[:, 0]))
    return opnorm * diam


def _lattice(grids):
    """C-ordered lattice of coordinate tuples from per-direction value lists."""
    return np.array(list(itertools.product(*grids)), dtype=float)


def benchmark_patch(patch_id, final_time=1.0):
    """Exact-geometry NURBS patches used by the benchmark problems.

    ``unit_interval_time``: (0,1) x (0,T); ``unit_square_time``:
    (0,1)^2 x (0,T); ``quarter_annulus_time``: quarter annulus with radii
    1 and 2 in the first quadrant, extruded to (0,T).
    """
    T = float(final_time)
    if T <= 0:
        raise GeometryError("final time must be positive")
    lin = KnotVector([0.0, 0.0, 1.0, 1.0], 1)
    if patch_id == "unit_interval_time":
        space = TensorSplineSpace([lin, lin])
        P = _lattice([[0.0, 1.0], [0.0, T]])
        return GeometryMap(space, P, np.ones(4), T)
    if patch_id == "unit_square_time":
        space = TensorSplineSpace([lin, lin, lin])
        P = _lattice([[0.0, 1.0], [0.0, 1.0], [0.0, T]])
        return GeometryMap(space, P, np.ones(8), T)
    if patch_id == "quarter_annulus_time":
        # radius first, then angle: keeps det J positive
        quad = KnotVector([0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2)
        space = TensorSplineSpace([lin, quad, lin])
        arc = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        arc_w = np.array([1.0, np.sqrt(2.0) / 2.0, 1.0])
        pts = []
        wts = []
        for r in (1.0, 2.0):
            for i in range(3):
                for t in (0.0, T):
                    pts.append([r * arc[i, 0], r * arc[i, 1], t])
                    wts.append(arc_w[i])
        return GeometryMap(space, np.array(pts), np.array(wts), T)
    raise GeometryError(f"unknown benchmark patch {patch_id!r}")
