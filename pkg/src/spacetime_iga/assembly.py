"""Assembly of the locally stabilized space-time Galerkin system.

The bilinear form is integrated element by element in its integrated-by-parts
form

    (dt u, v)_K + (grad_x u, grad_x v)_K
        + delta_K [ (dt u, dt v)_K - (lap_x u, dt v)_K ],

which coincides with the facet formulation for C^1 bases because the facet
contributions recombine into the element-wise spatial Laplacian.  The load is
(f, v)_Q + sum_K delta_K (f, dt v)_K.  Boundary and initial data are imposed
strongly by collocation at hierarchical Greville sites.
"""

import itertools

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.special import comb

from .geometry import element_size, phys_gradients, spatial_laplacian
from .linalg import lu_solve
from .quadrature import gauss_rule

__all__ = [
    "StabilizationConfig",
    "StabilizedSystem",
    "compute_delta",
    "estimate_Cinv",
    "assemble_stabilized_system",
    "impose_dirichlet",
    "apply_bilinear",
    "norm_loc_h",
    "element_data",
    "face_data",
    "element_matrices",
]


class StabilizationConfig:
    """Upwind stabilization parameters.

    ``mode`` is 'local' (delta_K = theta_K h_K), 'global' (delta = theta h)
    or 'off'.  With ``use_paper_bound`` the effective theta_K is clamped to
    h_K / (d C_int1^2), which keeps the bilinear form provably coercive.
    """

    def __init__(self, mode="local", theta=0.1, use_paper_bound=True,
                 C_int1=None, d=1, degree=2):
        if mode not in ("local", "global", "off"):
            raise ValueError(f"unknown stabilization mode {mode!r}")
        if theta <= 0:
            raise ValueError("theta must be positive")
        self.mode = mode
        self.theta = float(theta)
        self.use_paper_bound = bool(use_paper_bound)
        self.d = int(d)
        self.degree = int(degree)
        self.C_int1 = float(C_int1) if C_int1 is not None else estimate_Cinv(degree, d)

    def theta_eff(self, h):
        if self.use_paper_bound:
            return min(self.theta, h / (self.d * self.C_int1**2))
        return self.theta


def compute_delta(h_elem, cfg, h_global=None):
    """Stabilization weight delta_K for one element."""
    if cfg.mode == "off":
        return 0.0
    if cfg.mode == "global":
        h = h_global if h_global is not None else h_elem
        return cfg.theta_eff(h) * h
    return cfg.theta_eff(h_elem) * h_elem


_cinv_cache = {}


def _bernstein_ders(p, x):
    """Bernstein basis values and first derivatives at points x."""
    vals = np.empty((x.size, p + 1))
    ders = np.empty((x.size, p + 1))
    for i in range(p + 1):
        c = comb(p, i, exact=True)
        vals[:, i] = c * x**i * (1 - x) ** (p - i)
        di = c * i * x ** (i - 1) * (1 - x) ** (p - i) if i > 0 else 0.0
        dj = (
            c * (p - i) * x**i * (1 - x) ** (p - i - 1)
            if i < p
            else 0.0
        )
        ders[:, i] = di - dj
    return vals, ders


def estimate_Cinv(p, d=1, width=1.0):
    """Smallest C with ||v'|| <= C h^-1 ||v|| over degree-p polynomials.

    Solved as the largest generalized eigenvalue of stiffness vs mass on a
    reference element of the given width; the result is width-independent
    and cached per degree.
    """
    key = int(p)
    if key in _cinv_cache and width == 1.0:
        return _cinv_cache[key]
    rule = gauss_rule(p + 1, 1)
    x = rule.nodes1d
    w = rule.weights1d * width
    vals, ders = _bernstein_ders(p, x)
    ders = ders / width
    M = vals.T @ (vals * w[:, None])
    S = ders.T @ (ders * w[:, None])
    lam = scipy.linalg.eigvalsh(S, M)[-1]
    C = float(width * np.sqrt(lam))
    if width == 1.0:
        _cinv_cache[key] = C
    return C


class ElementData:
    """Quadrature-ready data for one active cell.

    Holds parameter points/weights, geometry data, global function indices
    and physical basis values, gradients, time derivatives and spatial
    Laplacians at the quadrature points.
    """

    __slots__ = (
        "lv", "cell", "box", "w", "wdet", "xi", "gdata", "funcs",
        "vals", "grad", "dt", "lap", "h",
    )

    def __init__(self, lv, cell, box, w, wdet, xi, gdata, funcs, vals, grad,
                 dt, lap, h):
        self.lv = lv
        self.cell = cell
        self.box = box
        self.w = w
        self.wdet = wdet
        self.xi = xi
        self.gdata = gdata
        self.funcs = funcs
        self.vals = vals
        self.grad = grad
        self.dt = dt
        self.lap = lap
        self.h = h

    @property
    def key(self):
        return (self.lv, self.cell)


def element_data(space, geo, rule, nderiv=2):
    """Per-cell quadrature data for all active cells (cached on the space)."""
    cache = getattr(space, "_elem_cache", None)
    if cache is None:
        cache = space._elem_cache = {}
    key = (geo, rule.npoints, nderiv)
    if key in cache:
        return cache[key]
    out = []
    D = space.dim
    for lv, cell in space.mesh.active_cells():
        box = space.mesh.cell_box(lv, cell)
        widths = box[:, 1] - box[:, 0]
        coords = [box[a, 0] + rule.nodes1d * widths[a] for a in range(D)]
        w = rule.weights * float(np.prod(widths))
        gdata = geo.eval_grid(coords, nderiv=min(nderiv, 2))
        funcs, C = space.cell_extraction(lv, cell)
        tvals, tgrad, thess = space.eval_cell_grid(lv, cell, coords, nderiv)
        vals = tvals @ C.T
        grad_param = np.einsum("qdn,an->qda", tgrad, C)
        grad = phys_gradients(gdata, grad_param)
        lap = None
        if nderiv >= 2:
            hess_param = np.einsum("qden,an->qdea", thess, C)
            lap = spatial_laplacian(gdata, grad, hess_param)
        gidx = np.array([space.global_index[f] for f in funcs], dtype=int)
        xi = np.array(list(itertools.product(*coords)))
        out.append(
            ElementData(
                lv, cell, box, w, w * np.abs(gdata.det), xi, gdata, gidx,
                vals, grad, grad[:, D - 1, :], lap,
                element_size(geo, box),
            )
        )
    cache[key] = out
    return out


class FaceData:
    """Quadrature data on the part of a time face covered by one cell."""

    __slots__ = ("lv", "cell", "xi", "wface", "gdata", "funcs", "vals", "grad")

    def __init__(self, lv, cell, xi, wface, gdata, funcs, vals, grad):
        self.lv = lv
        self.cell = cell
        self.xi = xi
        self.wface = wface
        self.gdata = gdata
        self.funcs = funcs
        self.vals = vals
        self.grad = grad


def face_data(space, geo, rule, at_end=True):
    """Quadrature data on the initial (tau=0) or terminal (tau=1) face."""
    cache = getattr(space, "_face_cache", None)
    if cache is None:
        cache = space._face_cache = {}
    key = (geo, rule.npoints, at_end)
    if key in cache:
        return cache[key]
    D = space.dim
    tcoord = 1.0 if at_end else 0.0
    out = []
    for lv, cell in space.mesh.active_cells():
        box = space.mesh.cell_box(lv, cell)
        if box[D - 1, 1 if at_end else 0] != tcoord:
            continue
        widths = box[:, 1] - box[:, 0]
        coords = [box[a, 0] + rule.nodes1d * widths[a] for a in range(D - 1)]
        coords.append(np.array([tcoord]))
        area = float(np.prod(widths[: D - 1]))
        wq = np.array(
            [np.prod(c) for c in itertools.product(*([rule.weights1d] * (D - 1)), [1.0])]
        ) * area
        gdata = geo.eval_grid(coords, nderiv=1)
        A = gdata.J[:, :, : D - 1]
        G = np.einsum("qmi,qmj->qij", A, A)
        dS = np.sqrt(np.linalg.det(G))
        funcs, C = space.cell_extraction(lv, cell)
        tvals, tgrad, _ = space.eval_cell_grid(lv, cell, coords, nderiv=1)
        vals = tvals @ C.T
        grad = phys_gradients(gdata, np.einsum("qdn,an->qda", tgrad, C))
        gidx = np.array([space.global_index[f] for f in funcs], dtype=int)
        xi = np.array(list(itertools.product(*coords)))
        out.append(FaceData(lv, cell, xi, wq * dS, gdata, gidx, vals, grad))
    cache[key] = out
    return out


def _local_blocks(ed, d):
    """Per-element term matrices, rows = test, cols = trial."""
    wv = ed.vals * ed.wdet[:, None]
    wdt = ed.dt * ed.wdet[:, None]
    dt_v = np.einsum("qi,qj->ij", wv, ed.dt)
    grad_grad = np.einsum("qai,qaj->ij", ed.grad[:, :d, :] * ed.wdet[:, None, None],
                          ed.grad[:, :d, :])
    dt_dt = np.einsum("qi,qj->ij", wdt, ed.dt)
    lap_dt = np.einsum("qi,qj->ij", wdt, ed.lap)
    return dt_v, grad_grad, dt_dt, lap_dt


def element_matrices(space, geo, cfg, rule, lv, cell):
    """Bilinear-form term matrices of one element, for inspection and tests.

    Returns a dict with keys 'dt_v', 'grad_grad', 'dt_dt', 'lap_dt',
    'delta', 'funcs'; the assembled local matrix is
    dt_v + grad_grad + delta * (dt_dt - lap_dt).
    """
    for ed in element_data(space, geo, rule):
        if ed.key == (lv, cell):
            break
    else:
        raise ValueError(f"cell {(lv, cell)} is not active")
    d = geo.dim - 1
    dt_v, grad_grad, dt_dt, lap_dt = _local_blocks(ed, d)
    deltas = compute_deltas(element_data(space, geo, rule), cfg)
    return {
        "dt_v": dt_v,
        "grad_grad": grad_grad,
        "dt_dt": dt_dt,
        "lap_dt": lap_dt,
        "delta": deltas[ed.key],
        "funcs": ed.funcs,
    }


def compute_deltas(elements, cfg):
    """Stabilization weights for a list of elements, keyed by (level, cell)."""
    h_global = max(ed.h for ed in elements) if elements else 0.0
    return {ed.key: compute_delta(ed.h, cfg, h_global) for ed in elements}


class StabilizedSystem:
    """Sparse stabilized system with a free/fixed partition.

    ``K`` and ``rhs`` carry the boundary conditions folded in (identity rows
    on fixed indices); ``K_raw``/``rhs_raw`` are the unconstrained
    counterparts used for residual evaluation and bilinear-form application.
    """

    def __init__(self, space, geo, cfg, rule, K_raw, rhs_raw, deltas):
        self.space = space
        self.geo = geo
        self.cfg = cfg
        self.rule = rule
        self.K_raw = K_raw
        self.rhs_raw = rhs_raw
        self.deltas = deltas
        self.n = space.ndof
        self.K = K_raw
        self.rhs = rhs_raw
        self.free = np.arange(self.n)
        self.fixed = np.array([], dtype=int)
        self.fixed_values = np.array([])

    def solve(self):
        """Solve for the coefficient vector (fixed values included)."""
        return lu_solve(self.K, self.rhs)

    def free_block(self):
        """Free-index block of the raw (unconstrained) matrix."""
        return self.K_raw[np.ix_(self.free, self.free)]


def assemble_stabilized_system(space, geo, source, cfg, rule=None):
    """Assemble matrix and load of the stabilized space-time scheme."""
    p = max(space.degrees)
    if not all(kv.is_c1_capable() for kv in space.mesh.levels[0].kvs):
        raise ValueError("scheme requires degree >= 2 and C^1 smoothness in Q")
    rule = rule or gauss_rule(p + 2, space.dim)
    elements = element_data(space, geo, rule)
    deltas = compute_deltas(elements, cfg)
    d = geo.dim - 1
    n = space.ndof
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    for ed in elements:
        delta = deltas[ed.key]
        dt_v, grad_grad, dt_dt, lap_dt = _local_blocks(ed, d)
        A = dt_v + grad_grad + delta * (dt_dt - lap_dt)
        f_q = np.asarray(source(ed.xi, geo, ed.gdata), dtype=float)
        fw = f_q * ed.wdet
        b = ed.vals.T @ fw + delta * (ed.dt.T @ fw)
        m = ed.funcs.size
        rows.append(np.repeat(ed.funcs, m))
        cols.append(np.tile(ed.funcs, m))
        vals.append(A.ravel())
        rhs[ed.funcs] += b
    K = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    K.sum_duplicates()
    return StabilizedSystem(space, geo, cfg, rule, K, rhs, deltas)


def dirichlet_function_set(space):
    """Indices of active functions with support on Sigma or Sigma_0.

    For open knot vectors these are exactly the functions whose index
    touches a spatial face (first/last function in a spatial direction) or
    the initial time face.
    """
    D = space.dim
    fixed = []
    for g, (lv, idx) in enumerate(space.functions):
        shape = space.mesh.levels[lv].shape
        on_sigma = any(idx[a] in (0, shape[a] - 1) for a in range(D - 1))
        if on_sigma or idx[D - 1] == 0:
            fixed.append(g)
    return np.array(fixed, dtype=int)


def _collocation_sites(space, fixed):
    """One site per fixed function: its per-level Greville point.

    Coinciding sites across levels (corner functions) are nudged toward the
    function's support centre, which keeps the collocation matrix square
    and invertible while remaining deterministic.
    """
    sites = np.empty((fixed.size, space.dim))
    seen = {}
    for k, g in enumerate(fixed):
        lv, idx = space.functions[g]
        level = space.mesh.levels[lv]
        pt = level.greville_point(idx)
        key = tuple(np.round(pt, 13))
        while key in seen:
            lo = np.array([kv.knots[i] for kv, i in zip(level.kvs, idx)])
            hi = np.array(
                [kv.knots[i + kv.degree + 1] for kv, i in zip(level.kvs, idx)]
            )
            pt = 0.5 * (pt + 0.5 * (lo + hi))
            key = tuple(np.round(pt, 13))
        seen[key] = g
        sites[k] = pt
    return sites


def impose_dirichlet(system, boundary_values, space=None, geo=None):
    """Fix boundary/initial coefficients by Greville collocation of the data.

    ``boundary_values(xi, geo)`` returns the prescribed trace at parameter
    points on Sigma union Sigma_0 (u_D on the lateral boundary, u_0 at
    tau = 0).  The fixed values are folded into the load; fixed rows and
    columns are replaced by identity.
    """
    from .hierarchical import eval_active

    space = space or system.space
    geo = geo or system.geo
    fixed = dirichlet_function_set(space)
    n = space.ndof
    if fixed.size == 0:
        return system
    sites = _collocation_sites(space, fixed)
    pos = {g: k for k, g in enumerate(fixed)}
    A = np.zeros((fixed.size, fixed.size))
    for k in range(fixed.size):
        gidx, vals, _, _ = eval_active(space, sites[k])
        for g, v in zip(gidx, vals):
            if g in pos:
                A[k, pos[g]] = v
    gvals = np.asarray(boundary_values(sites, geo), dtype=float)
    fixed_values = lu_solve(sp.csr_matrix(A), gvals)
    free = np.setdiff1d(np.arange(n), fixed)
    K = system.K_raw.tolil(copy=True)
    rhs = system.rhs_raw.copy()
    rhs -= system.K_raw[:, fixed] @ fixed_values
    K[fixed, :] = 0.0
    K[:, fixed] = 0.0
    for k, g in enumerate(fixed):
        K[g, g] = 1.0
        rhs[g] = fixed_values[k]
    out = StabilizedSystem(
        space, geo, system.cfg, system.rule, system.K_raw, system.rhs_raw,
        system.deltas,
    )
    out.K = K.tocsr()
    out.rhs = rhs
    out.free = free
    out.fixed = fixed
    out.fixed_values = fixed_values
    return out


def apply_bilinear(space, geo, cfg, u_coeffs, v_coeffs, rule=None):
    """Evaluate the stabilized bilinear form on two coefficient vectors."""
    rule = rule or gauss_rule(max(space.degrees) + 2, space.dim)
    elements = element_data(space, geo, rule)
    deltas = compute_deltas(elements, cfg)
    d = geo.dim - 1
    total = 0.0
    for ed in elements:
        delta = deltas[ed.key]
        dt_v, grad_grad, dt_dt, lap_dt = _local_blocks(ed, d)
        A = dt_v + grad_grad + delta * (dt_dt - lap_dt)
        total += float(v_coeffs[ed.funcs] @ A @ u_coeffs[ed.funcs])
    return total


def norm_loc_h(space, geo, cfg, v_coeffs, rule=None):
    """Mesh-dependent norm of the scheme: returns its square.

    |||v|||^2 = ||grad_x v||_Q^2 + 1/2 ||v||_{Sigma_T}^2
                + sum_K delta_K ||dt v||_K^2.
    """
    rule = rule or gauss_rule(max(space.degrees) + 2, space.dim)
    elements = element_data(space, geo, rule)
    deltas = compute_deltas(elements, cfg)
    d = geo.dim - 1
    total = 0.0
    for ed in elements:
        vloc = v_coeffs[ed.funcs]
        gx = np.einsum("qan,n->qa", ed.grad[:, :d, :], vloc)
        dtv = ed.dt @ vloc
        total += float(np.sum(ed.wdet * np.sum(gx**2, axis=1)))
        total += deltas[ed.key] * float(np.sum(ed.wdet * dtv**2))
    for fd in face_data(space, geo, rule, at_end=True):
        vv = fd.vals @ v_coeffs[fd.funcs]
        total += 0.5 * float(np.sum(fd.wface * vv**2))
    return total
