"""Bulk marking, convergence rates, and the solve-estimate-mark-refine loop.

Marking works on squared per-cell indicator contributions, so the marked
mass adds up exactly to the squared distance part of the majorant.  The
driver records one report per step; each report carries the mesh snapshot,
the estimator values and both candidate marked sets (majorant-driven and
exact-error-driven) so indicator fidelity can be measured.
"""

import time

import numpy as np

from .assembly import (
    StabilizationConfig,
    assemble_stabilized_system,
    element_data,
    impose_dirichlet,
)
from .estimators import (
    build_flux_space,
    companion_space,
    effectivity,
    error_identity,
    exact_error_norms,
    majorant_I,
    majorant_II,
)
from .hierarchical import HierarchicalSplineSpace, refine_marked
from .quadrature import gauss_rule
from .splines import KnotVector, dyadic_refine

__all__ = [
    "MarkingConfig",
    "LoopConfig",
    "StepRecord",
    "bulk_mark",
    "eoc",
    "initial_space",
    "adaptive_loop",
]


class MarkingConfig:
    """Bulk (Doerfler) marking: fraction sigma of the squared indicator mass."""

    def __init__(self, sigma=0.4, source="majorant"):
        if not 0.0 <= sigma <= 1.0:
            raise ValueError("sigma must lie in [0, 1]")
        if source not in ("majorant", "exact"):
            raise ValueError("indicator source must be 'majorant' or 'exact'")
        self.sigma = float(sigma)
        self.source = source


class LoopConfig:
    """Configuration of one refinement study."""

    def __init__(self, p=2, q=3, r=None, flux_coarsening=5, n_ref0=1, n_ref=8,
                 marking=None, stabilization=None, uniform=False,
                 dim_cap=200_000, majorant_iters=3, with_majorant=True,
                 with_advanced=True, with_identity=True, with_exact=True):
        if p < 2:
            raise ValueError("primal degree must be at least 2")
        if n_ref0 < 0 or n_ref < 0:
            raise ValueError("refinement counts must be nonnegative")
        self.p = int(p)
        self.q = int(q)
        self.r = int(r) if r is not None else int(q)
        self.flux_coarsening = int(flux_coarsening)
        self.n_ref0 = int(n_ref0)
        self.n_ref = int(n_ref)
        self.marking = marking or MarkingConfig()
        self.stabilization = stabilization
        self.uniform = bool(uniform)
        self.dim_cap = int(dim_cap)
        self.majorant_iters = int(majorant_iters)
        self.with_majorant = bool(with_majorant)
        self.with_advanced = bool(with_advanced)
        self.with_identity = bool(with_identity)
        self.with_exact = bool(with_exact)


class StepRecord:
    """Everything recorded about one step of the refinement loop."""

    def __init__(self, step, report, snapshot, eta2, marks_majorant,
                 marks_exact, h_max, coeffs=None):
        self.step = step
        self.report = report
        self.snapshot = snapshot       # list of (level, cell, box)
        self.eta2 = eta2               # per-cell squared indicators
        self.marks_majorant = marks_majorant
        self.marks_exact = marks_exact
        self.h_max = h_max
        self.coeffs = coeffs


def bulk_mark(eta2, sigma):
    """Smallest set of cells whose squared-indicator mass reaches sigma.

    Cells are ranked by decreasing contribution with index-ascending tie
    break; sigma = 0 returns the single largest cell, sigma = 1 every cell
    with a positive contribution.
    """
    if not eta2:
        raise ValueError("empty indicator table")
    if any(v < 0 for v in eta2.values()):
        raise ValueError("indicator contributions must be nonnegative")
    ranked = sorted(eta2.items(), key=lambda kv: (-kv[1], kv[0]))
    if sigma == 0.0:
        return {ranked[0][0]}
    if sigma == 1.0:
        return {k for k, v in ranked if v > 0}
    total = sum(eta2.values())
    target = sigma * total
    acc = 0.0
    marked = set()
    for k, v in ranked:
        if acc >= target:
            break
        marked.add(k)
        acc += v
    return marked


def eoc(values, scales):
    """Experimental orders of convergence from error and scale sequences."""
    values = np.asarray(values, dtype=float)
    scales = np.asarray(scales, dtype=float)
    if np.any(values <= 0) or np.any(scales <= 0):
        raise ValueError("convergence rates need positive errors and scales")
    return list(np.log(values[:-1] / values[1:]) / np.log(scales[:-1] / scales[1:]))


def initial_space(case, p, n_ref0):
    """Degree-p THB space on the patch after the initial uniform refinements."""
    geo = case.make_patch()
    kv = KnotVector([0.0] * (p + 1) + [1.0] * (p + 1), p)
    for _ in range(n_ref0):
        kv = dyadic_refine(kv)
    return geo, HierarchicalSplineSpace.from_knots([kv] * geo.dim)


def _solve_primal(case, space, geo, cfg, timings):
    t0 = time.perf_counter()
    system = assemble_stabilized_system(space, geo, case.source, cfg)
    system = impose_dirichlet(system, case.boundary)
    timings["t_as_u"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    coeffs = system.solve()
    timings["t_sol_u"] = time.perf_counter() - t0
    return coeffs


def adaptive_loop(case, cfg):
    """Run the solve-estimate-mark-refine loop and return its step records.

    A step failure terminates the loop and the partial records are
    returned; the final (n_ref-th) mesh is solved and recorded but not
    refined further.
    """
    geo, space = initial_space(case, cfg.p, cfg.n_ref0)
    d = geo.dim - 1
    stab = cfg.stabilization or StabilizationConfig(d=d, degree=cfg.p)
    records = []
    for step in range(cfg.n_ref + 1):
        if space.ndof > cfg.dim_cap:
            break
        timings = {}
        try:
            coeffs = _solve_primal(case, space, geo, stab, timings)
        except Exception:
            if records:
                return records
            raise
        report = None
        maj = None
        if cfg.with_exact and case.exact is not None:
            report = exact_error_norms(space, geo, stab, coeffs, case.exact)
        else:
            from .estimators import ErrorReport

            report = ErrorReport()
            report.dof_u = space.ndof
        if cfg.with_majorant:
            flux = build_flux_space(space, geo, cfg.q, cfg.flux_coarsening)
            maj = majorant_I(space, geo, coeffs, case.source, case.C_F, flux,
                             iters=cfg.majorant_iters)
            report.MI = maj.value
            report.dof_y = flux.ndof
            timings["t_as_y"] = maj.t_as
            timings["t_sol_y"] = maj.t_sol
            if cfg.with_advanced:
                wsp = companion_space(space, geo, cfg.r, cfg.flux_coarsening)
                wstab = StabilizationConfig(
                    mode=stab.mode, theta=stab.theta,
                    use_paper_bound=stab.use_paper_bound, d=d, degree=cfg.r,
                )
                t0 = time.perf_counter()
                wsys = assemble_stabilized_system(wsp, geo, case.source, wstab)
                wsys = impose_dirichlet(wsys, case.boundary)
                timings["t_as_w"] = time.perf_counter() - t0
                t0 = time.perf_counter()
                wcoeffs = wsys.solve()
                timings["t_sol_w"] = time.perf_counter() - t0
                report.MII, _ = majorant_II(
                    space, geo, coeffs, wsp, wcoeffs, flux, maj.flux_coeffs,
                    case.source, case.C_F,
                )
                report.dof_w = wsp.ndof
        if cfg.with_identity:
            report.EId = error_identity(space, geo, coeffs, case.source,
                                        case.u0_grad)
        effectivity(report)
        report.timings = timings
        rule = gauss_rule(cfg.p + 2, geo.dim)
        elements = element_data(space, geo, rule)
        h_max = max(ed.h for ed in elements)
        snapshot = [
            (lv, cell, space.mesh.cell_box(lv, cell))
            for lv, cell in space.mesh.active_cells()
        ]
        eta2 = dict(maj.eta2) if maj is not None else None
        marks_majorant = (
            bulk_mark(maj.eta2, cfg.marking.sigma) if maj is not None else None
        )
        marks_exact = (
            bulk_mark(report.eta_exact, cfg.marking.sigma)
            if report.eta_exact is not None
            else None
        )
        records.append(
            StepRecord(step, report, snapshot, eta2, marks_majorant,
                       marks_exact, h_max, coeffs)
        )
        if step == cfg.n_ref:
            break
        if cfg.uniform:
            marked = set(space.mesh.active_cells())
        elif cfg.marking.source == "majorant":
            marked = marks_majorant
        else:
            marked = marks_exact
        if not marked:
            break
        space = refine_marked(space, marked)
    return records
