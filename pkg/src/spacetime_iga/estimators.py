"""Exact error norms, guaranteed majorants, and the exact error identity.

The first majorant bounds the energy error through an auxiliary spatial
flux field minimized over a (usually coarser) spline space; the advanced
majorant sharpens it with a higher-order companion solution.  The error
identity reproduces the combined operator norm of the error exactly, up to
quadrature, and serves as a consistency check of the whole pipeline.
"""

import itertools
import time

import numpy as np
import scipy.sparse as sp

from .assembly import compute_deltas, element_data, face_data
from .geometry import phys_gradients
from .hierarchical import HierarchicalSplineSpace, coarsen_mesh, eval_active
from .linalg import ldlt_solve
from .quadrature import gauss_rule

__all__ = [
    "FluxSpace",
    "MajorantReport",
    "ErrorReport",
    "friedrichs_constant",
    "build_flux_space",
    "exact_error_norms",
    "majorant_I",
    "majorant_II",
    "error_identity",
    "local_indicators",
    "effectivity",
    "project_l2",
    "eval_function",
]

BETA_CAP = 1e8

_FRIEDRICHS = {
    "unit_interval": 1.0 / np.pi,
    "unit_square": 1.0 / (np.sqrt(2.0) * np.pi),
    "quarter_annulus": 2.0 * np.sqrt(2.0) / np.pi,
}


def friedrichs_constant(domain_id):
    """Safe upper bound for the Friedrichs constant of a benchmark domain.

    The quarter annulus uses the conservative diam/pi bound with
    diam = 2 sqrt(2); any upper bound keeps the majorant guaranteed.
    """
    key = domain_id.removesuffix("_time")
    try:
        return _FRIEDRICHS[key]
    except KeyError:
        raise ValueError(f"unknown domain {domain_id!r}") from None


class FluxSpace:
    """Vector flux space: d spatial components in one scalar THB space."""

    def __init__(self, scalar_space, ncomp):
        self.scalar = scalar_space
        self.ncomp = ncomp
        self.ndof = ncomp * scalar_space.ndof

    def component_slice(self, c):
        n = self.scalar.ndof
        return slice(c * n, (c + 1) * n)


def build_flux_space(primal_space, geo, degree, coarsening):
    """Flux space of the given degree on the mesh coarsened by ``coarsening``.

    The coarsened mesh keeps the adaptive grading of the primal mesh but
    demotes every cell by round(log2(M)) levels.
    """
    D = primal_space.dim
    mesh = coarsen_mesh(primal_space.mesh, coarsening, degrees=(degree,) * D)
    return FluxSpace(HierarchicalSplineSpace(mesh), D - 1)


def companion_space(primal_space, geo, degree, coarsening):
    """Scalar space for the advanced-majorant companion solution w."""
    D = primal_space.dim
    mesh = coarsen_mesh(primal_space.mesh, coarsening, degrees=(degree,) * D)
    return HierarchicalSplineSpace(mesh)


class MajorantReport:
    """Result of the flux minimization for the first majorant."""

    def __init__(self, m_d, m_eq, beta, value, iterations, flux_coeffs, eta2,
                 dof, t_as=0.0, t_sol=0.0):
        self.m_d = m_d
        self.m_eq = m_eq
        self.beta = beta
        self.value = value
        self.iterations = iterations
        self.flux_coeffs = flux_coeffs
        self.eta2 = eta2
        self.dof = dof
        self.t_as = t_as
        self.t_sol = t_sol


class ErrorReport:
    """Norms, estimator values and effectivity indices for one mesh."""

    def __init__(self):
        self.grad_err = None       # ||grad_x e||_Q
        self.e_sigma_T = None      # ||e||_{Sigma_T}
        self.triple = None         # (grad_err^2 + e_sigma_T^2)^(1/2)
        self.triple_loc = None     # scheme norm |||e|||_loc,h
        self.triple_L = None       # operator norm |||e|||_L
        self.EId = None
        self.MI = None             # squared majorant value
        self.MII = None            # squared advanced majorant value
        self.ieff_MI = None
        self.ieff_MII = None
        self.ieff_EId = None
        self.eta_exact = None      # per-cell ||grad_x e||_K^2
        self.dof_u = None
        self.dof_y = None
        self.dof_w = None
        self.timings = {}


def _overlay_boxes(primal_space, aux_space):
    """Common-refinement boxes of the primal and auxiliary partitions.

    Yields (box, primal_key, aux_key); each box lies inside one active cell
    of both meshes, so every integrand is smooth on it.
    """
    amesh = aux_space.mesh
    out = []
    for lvp, cp in primal_space.mesh.active_cells():
        seg = []
        stack = [(lvp, cp)]
        covered = True
        while stack:
            m, c = stack.pop()
            if m < amesh.nlevels and c in amesh.active[m]:
                seg.append((m, c))
            elif m < amesh.nlevels and c in amesh.deactivated[m]:
                stack.extend((m + 1, k) for k in itertools.product(
                    *((2 * ci, 2 * ci + 1) for ci in c)))
            else:
                covered = False
                break
        if covered and seg:
            for m, c in sorted(seg):
                out.append((amesh.cell_box(m, c), (lvp, cp), (m, c)))
        else:
            box = primal_space.mesh.cell_box(lvp, cp)
            akey = amesh.point_cell(0.5 * (box[:, 0] + box[:, 1]))
            out.append((box, (lvp, cp), akey))
    return out


class _OverlayData:
    __slots__ = ("box", "pkey", "akey", "xi", "wdet", "gdata",
                 "pfuncs", "pvals", "pgrad", "afuncs", "avals", "agrad")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def _overlay_data(primal_space, aux_space, geo, rule):
    cache = getattr(primal_space, "_overlay_cache", None)
    if cache is None:
        cache = primal_space._overlay_cache = {}
    key = (aux_space, geo, rule.npoints)
    if key in cache:
        return cache[key]
    D = primal_space.dim
    out = []
    for box, pkey, akey in _overlay_boxes(primal_space, aux_space):
        widths = box[:, 1] - box[:, 0]
        coords = [box[a, 0] + rule.nodes1d * widths[a] for a in range(D)]
        w = rule.weights * float(np.prod(widths))
        gdata = geo.eval_grid(coords, nderiv=1)
        pf, pC = primal_space.cell_extraction(*pkey)
        pv, pg, _ = primal_space.eval_cell_grid(pkey[0], pkey[1], coords, 1)
        af, aC = aux_space.cell_extraction(*akey)
        av, ag, _ = aux_space.eval_cell_grid(akey[0], akey[1], coords, 1)
        out.append(_OverlayData(
            box=box, pkey=pkey, akey=akey,
            xi=np.array(list(itertools.product(*coords))),
            wdet=w * np.abs(gdata.det), gdata=gdata,
            pfuncs=np.array([primal_space.global_index[f] for f in pf]),
            pvals=pv @ pC.T,
            pgrad=phys_gradients(gdata, np.einsum("qdn,an->qda", pg, pC)),
            afuncs=np.array([aux_space.global_index[f] for f in af]),
            avals=av @ aC.T,
            agrad=phys_gradients(gdata, np.einsum("qdn,an->qda", ag, aC)),
        ))
    cache[key] = out
    return out


def majorant_I(primal_space, geo, u_coeffs, source, C_F, flux, iters=3,
               rule=None):
    """Minimize the first majorant over the flux space.

    Assembles the divergence and mass matrices once, then alternates the
    SPD flux solve with the closed-form update of the weight beta.  The
    returned report carries the distance/equilibration parts, the final
    beta, the squared majorant value and per-element indicator table.
    """
    if iters < 1:
        raise ValueError("at least one minimization round is required")
    D = primal_space.dim
    d = D - 1
    q = max(flux.scalar.degrees)
    rule = rule or gauss_rule(q + 2, D)
    t0 = time.perf_counter()
    boxes = _overlay_data(primal_space, flux.scalar, geo, rule)
    ns = flux.scalar.ndof
    n = flux.ndof
    rows, cols, dvals, mvals = [], [], [], []
    z = np.zeros(n)
    g = np.zeros(n)
    static = []
    for od in boxes:
        uloc = u_coeffs[od.pfuncs]
        gradu = np.einsum("qan,n->qa", od.pgrad, uloc)
        dtu = gradu[:, d]
        f_q = np.asarray(source(od.xi, geo, od.gdata), dtype=float)
        static.append((gradu, f_q))
        w = od.wdet
        nA = od.afuncs.size
        for c in range(d):
            dc = od.agrad[:, c, :]
            z[c * ns + od.afuncs] += dc.T @ ((f_q - dtu) * w)
            g[c * ns + od.afuncs] += od.avals.T @ (gradu[:, c] * w)
            for c2 in range(d):
                dc2 = od.agrad[:, c2, :]
                block = dc.T @ (dc2 * w[:, None])
                rows.append(np.repeat(c * ns + od.afuncs, nA))
                cols.append(np.tile(c2 * ns + od.afuncs, nA))
                dvals.append(block.ravel())
                if c2 == c:
                    mvals.append((od.avals.T @ (od.avals * w[:, None])).ravel())
                else:
                    mvals.append(np.zeros(nA * nA))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    Div = sp.csr_matrix((np.concatenate(dvals), (rows, cols)), shape=(n, n))
    M = sp.csr_matrix((np.concatenate(mvals), (rows, cols)), shape=(n, n))
    t_as = time.perf_counter() - t0

    def residuals(y):
        md2 = 0.0
        meq2 = 0.0
        eta2 = {}
        for od, (gradu, f_q) in zip(boxes, static):
            div_y = np.zeros(len(od.wdet))
            rd2 = np.zeros(len(od.wdet))
            for c in range(d):
                yc = y[c * ns + od.afuncs]
                rd = od.avals @ yc - gradu[:, c]
                rd2 += rd**2
                div_y += od.agrad[:, c, :] @ yc
            req = div_y + f_q - gradu[:, d]
            box_md2 = float(np.sum(od.wdet * rd2))
            md2 += box_md2
            meq2 += float(np.sum(od.wdet * req**2))
            eta2[od.pkey] = eta2.get(od.pkey, 0.0) + box_md2
        return md2, meq2, eta2

    beta = 1.0
    t_sol = 0.0
    value = np.inf
    for it in range(iters):
        t0 = time.perf_counter()
        y = ldlt_solve(C_F**2 * Div + beta * M, -(C_F**2) * z + beta * g)
        t_sol += time.perf_counter() - t0
        md2, meq2, eta2 = residuals(y)
        m_d, m_eq = np.sqrt(md2), np.sqrt(meq2)
        beta = min(C_F * m_eq / m_d, BETA_CAP) if m_d > 0 else BETA_CAP
        value = (1.0 + beta) * md2 + (1.0 + 1.0 / beta) * C_F**2 * meq2
    return MajorantReport(m_d, m_eq, beta, value, iters, y, eta2, n, t_as, t_sol)


def majorant_II(primal_space, geo, u_coeffs, w_space, w_coeffs, flux, y_coeffs,
                source, C_F, rule=None):
    """Advanced majorant combining the flux with a companion solution w.

    Returns ``(value, parts)`` where value bounds ||grad_x e||_Q^2 and
    parts holds the terminal term, the linear functional part, beta and the
    two residual norms.
    """
    D = primal_space.dim
    d = D - 1
    q = max(w_space.degrees)
    rule = rule or gauss_rule(q + 2, D)
    boxes = _overlay_data(primal_space, w_space, geo, rule)
    ns = w_space.ndof
    lin = 0.0
    rd2_tot = 0.0
    req2_tot = 0.0
    for od in boxes:
        uloc = u_coeffs[od.pfuncs]
        uvals = od.pvals @ uloc
        gradu = np.einsum("qan,n->qa", od.pgrad, uloc)
        wloc = w_coeffs[od.afuncs]
        wvals = od.avals @ wloc
        gradw = np.einsum("qan,n->qa", od.agrad, wloc)
        f_q = np.asarray(source(od.xi, geo, od.gdata), dtype=float)
        w = od.wdet
        diff_grad = gradw[:, :d] - gradu[:, :d]
        lin += float(np.sum(w * np.sum(gradu[:, :d] * diff_grad, axis=1)))
        lin += float(np.sum(w * (gradu[:, d] - f_q) * (wvals - uvals)))
        div_y = np.zeros(len(w))
        rd2 = np.zeros(len(w))
        for c in range(d):
            yc = y_coeffs[c * ns + od.afuncs]
            rd = od.avals @ yc + gradw[:, c] - 2.0 * gradu[:, c]
            rd2 += rd**2
            div_y += od.agrad[:, c, :] @ yc
        req = div_y + f_q - gradw[:, d]
        rd2_tot += float(np.sum(w * rd2))
        req2_tot += float(np.sum(w * req**2))
    # terminal mismatch on the primal trace mesh
    wT2 = 0.0
    for fd in face_data(primal_space, geo, rule, at_end=True):
        uv = fd.vals @ u_coeffs[fd.funcs]
        wv = eval_function(w_space, w_coeffs, fd.xi)
        wT2 += float(np.sum(fd.wface * (wv - uv) ** 2))
    r_d, r_eq = np.sqrt(rd2_tot), np.sqrt(req2_tot)
    beta = min(C_F * r_eq / r_d, BETA_CAP) if r_d > 0 else BETA_CAP
    value = (
        wT2 + 2.0 * lin + (1.0 + beta) * rd2_tot
        + C_F**2 * (1.0 + 1.0 / beta) * req2_tot
    )
    parts = {
        "terminal": wT2,
        "linear": lin,
        "r_d": r_d,
        "r_eq": r_eq,
        "beta": beta,
    }
    return value, parts


def error_identity(primal_space, geo, u_coeffs, source, u0_grad, rule=None):
    """Exact identity value: EId^2 over the mesh.

    EId^2 = ||grad_x(u_0 - u_h)||^2_{Sigma_0}
          + ||lap_x u_h + f - dt u_h||^2_Q.
    """
    D = primal_space.dim
    d = D - 1
    rule = rule or gauss_rule(max(primal_space.degrees) + 2, D)
    total = 0.0
    for ed in element_data(primal_space, geo, rule):
        uloc = u_coeffs[ed.funcs]
        lap = ed.lap @ uloc
        dtu = ed.dt @ uloc
        f_q = np.asarray(source(ed.xi, geo, ed.gdata), dtype=float)
        total += float(np.sum(ed.wdet * (lap + f_q - dtu) ** 2))
    for fd in face_data(primal_space, geo, rule, at_end=False):
        uloc = u_coeffs[fd.funcs]
        gx_h = np.einsum("qan,n->qa", fd.grad[:, :d, :], uloc)
        gx_0 = np.asarray(u0_grad(fd.xi, geo), dtype=float)
        total += float(np.sum(fd.wface * np.sum((gx_0 - gx_h) ** 2, axis=1)))
    return float(np.sqrt(total))


def exact_error_norms(primal_space, geo, cfg, u_coeffs, exact, rule=None):
    """Error norms of u_h against closed-form exact data.

    ``exact(xi, geo)`` returns a dict with keys ``u``, ``gx`` (spatial
    gradient, (nq, d)), ``ut`` and ``lap``.  Returns an ErrorReport with
    the norm fields and the per-element table of ||grad_x e||_K^2.
    """
    D = primal_space.dim
    d = D - 1
    rule = rule or gauss_rule(max(primal_space.degrees) + 2, D)
    elements = element_data(primal_space, geo, rule)
    deltas = compute_deltas(elements, cfg) if cfg is not None else None
    grad2 = 0.0
    loc2 = 0.0
    L2_lap = 0.0
    L2_dt = 0.0
    eta = {}
    for ed in elements:
        uloc = u_coeffs[ed.funcs]
        ex = exact(ed.xi, geo, ed.gdata)
        ge = np.einsum("qan,n->qa", ed.grad[:, :d, :], uloc) - ex["gx"]
        dte = ed.dt @ uloc - ex["ut"]
        lape = ed.lap @ uloc - ex["lap"]
        cell_grad2 = float(np.sum(ed.wdet * np.sum(ge**2, axis=1)))
        grad2 += cell_grad2
        eta[ed.key] = cell_grad2
        L2_lap += float(np.sum(ed.wdet * lape**2))
        L2_dt += float(np.sum(ed.wdet * dte**2))
        if deltas is not None:
            loc2 += deltas[ed.key] * float(np.sum(ed.wdet * dte**2))
    eT2 = 0.0
    gT2 = 0.0
    for fd in face_data(primal_space, geo, rule, at_end=True):
        uloc = u_coeffs[fd.funcs]
        ex = exact(fd.xi, geo, fd.gdata)
        ev = fd.vals @ uloc - ex["u"]
        gev = np.einsum("qan,n->qa", fd.grad[:, :d, :], uloc) - ex["gx"]
        eT2 += float(np.sum(fd.wface * ev**2))
        gT2 += float(np.sum(fd.wface * np.sum(gev**2, axis=1)))
    report = ErrorReport()
    report.grad_err = float(np.sqrt(grad2))
    report.e_sigma_T = float(np.sqrt(eT2))
    report.triple = float(np.sqrt(grad2 + eT2))
    if deltas is not None:
        report.triple_loc = float(np.sqrt(grad2 + 0.5 * eT2 + loc2))
    report.triple_L = float(np.sqrt(L2_lap + L2_dt + gT2))
    report.eta_exact = eta
    report.dof_u = primal_space.ndof
    return report


def local_indicators(report):
    """Per-element squared indicator table of the first majorant."""
    return dict(report.eta2)


def effectivity(report):
    """Effectivity indices; entries are NaN when a denominator vanishes.

    The square-rooted majorants are compared against the error norms, and
    the identity against the operator norm of the error.
    """
    out = {}
    if report.MI is not None:
        out["ieff_MI"] = (
            float(np.sqrt(report.MI) / report.triple) if report.triple else np.nan
        )
    if report.MII is not None:
        out["ieff_MII"] = (
            float(np.sqrt(max(report.MII, 0.0)) / report.grad_err)
            if report.grad_err
            else np.nan
        )
    if report.EId is not None:
        out["ieff_EId"] = (
            float(report.EId / report.triple_L) if report.triple_L else np.nan
        )
    for k, v in out.items():
        setattr(report, k, v)
    return out


def eval_function(space, coeffs, pts, nderiv=0):
    """Point values of a discrete function at arbitrary parameter points."""
    vals = np.empty(len(pts))
    for i, pt in enumerate(pts):
        gidx, v, _, _ = eval_active(space, pt, nderiv)
        vals[i] = v @ coeffs[gidx]
    return vals


def project_l2(space, geo, func, rule=None):
    """L2 projection of ``func(xi, geo)`` onto a THB space (physical measure)."""
    rule = rule or gauss_rule(max(space.degrees) + 2, space.dim)
    n = space.ndof
    rows, cols, vals = [], [], []
    b = np.zeros(n)
    for ed in element_data(space, geo, rule):
        block = ed.vals.T @ (ed.vals * ed.wdet[:, None])
        m = ed.funcs.size
        rows.append(np.repeat(ed.funcs, m))
        cols.append(np.tile(ed.funcs, m))
        vals.append(block.ravel())
        b[ed.funcs] += ed.vals.T @ (np.asarray(func(ed.xi, geo, ed.gdata)) * ed.wdet)
    M = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return ldlt_solve(M, b)
