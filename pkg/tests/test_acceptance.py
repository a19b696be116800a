"""Acceptance gate: the ten benchmark criteria at their stated tolerances.

Each test prints one ``[criterion N] PASS/FAIL`` line (visible with
``pytest tests/test_acceptance.py -v -s``) and asserts both the criterion
and its runtime budget.
"""

import itertools
import time

import numpy as np
import scipy.linalg

from conftest import uniform_kv

from spacetime_iga.adaptivity import (
    LoopConfig,
    MarkingConfig,
    adaptive_loop,
    bulk_mark,
    eoc,
)
from spacetime_iga.assembly import (
    StabilizationConfig,
    assemble_stabilized_system,
    compute_deltas,
    element_data,
    element_matrices,
    face_data,
    impose_dirichlet,
)
from spacetime_iga.benchmarks import example_case
from spacetime_iga.estimators import (
    build_flux_space,
    exact_error_norms,
    majorant_I,
    _overlay_data,
)
from spacetime_iga.geometry import benchmark_patch
from spacetime_iga.hierarchical import HierarchicalSplineSpace, refine_marked
from spacetime_iga.quadrature import gauss_rule
from spacetime_iga.splines import KnotVector


def gate(num, ok, detail, elapsed, budget):
    status = "PASS" if ok and elapsed < budget else "FAIL"
    print(f"[criterion {num:2d}] {status}: {detail} "
          f"({elapsed:.1f}s, budget {budget:.0f}s)")
    assert ok, f"criterion {num} failed: {detail}"
    assert elapsed < budget, f"criterion {num} exceeded budget: {elapsed:.1f}s"


def bezier_space(p, dim, nspans=1):
    return HierarchicalSplineSpace.from_knots([uniform_kv(p, nspans)] * dim)


def test_criterion_1_guaranteed_bound():
    t0 = time.perf_counter()
    worst = np.inf
    cases = [example_case("ex1"), example_case("ex2", k1=1, k2=1),
             example_case("ex3")]
    for case in cases:
        for uniform, steps in ((True, 4), (False, 6)):
            cfg = LoopConfig(
                p=2, q=3, flux_coarsening=1, n_ref0=1, n_ref=steps,
                uniform=uniform, marking=MarkingConfig(sigma=0.4),
                with_advanced=False, with_identity=False,
            )
            for rec in adaptive_loop(case, cfg):
                rep = rec.report
                margin = rep.MI - rep.triple**2 * (1 - 1e-8)
                worst = min(worst, margin / max(rep.triple**2, 1e-300))
    elapsed = time.perf_counter() - t0
    gate(1, worst >= 0.0,
         f"|||e|||^2 <= M_I on all runs (worst relative margin {worst:.2e})",
         elapsed, 120.0)


def test_criterion_2_error_identity():
    t0 = time.perf_counter()
    worst = 0.0
    for case in (example_case("ex1"), example_case("ex2", k1=1, k2=1)):
        cfg = LoopConfig(
            p=2, q=3, flux_coarsening=1, n_ref0=1, n_ref=6,
            marking=MarkingConfig(sigma=0.4, source="exact"),
            with_majorant=False, with_advanced=False,
        )
        for rec in adaptive_loop(case, cfg):
            worst = max(worst, abs(rec.report.ieff_EId - 1.0))
    elapsed = time.perf_counter() - t0
    gate(2, worst <= 1e-5,
         f"I_eff(EId) = 1 within {worst:.2e} on all steps", elapsed, 60.0)


def test_criterion_3_in_space_exactness():
    t0 = time.perf_counter()
    case = example_case("ex1")
    geo = case.make_patch()
    space = bezier_space(3, 2, nspans=4)
    cfg = StabilizationConfig(d=1, degree=3)
    system = impose_dirichlet(
        assemble_stabilized_system(space, geo, case.source, cfg), case.boundary
    )
    uh = system.solve()
    rep = exact_error_norms(space, geo, cfg, uh, case.exact)
    flux = build_flux_space(space, geo, degree=3, coarsening=1)
    maj = majorant_I(space, geo, uh, case.source, case.C_F, flux)
    elapsed = time.perf_counter() - t0
    gate(3, rep.grad_err <= 1e-10 and maj.value <= 1e-12,
         f"grad error {rep.grad_err:.2e} <= 1e-10, M_I {maj.value:.2e} <= 1e-12",
         elapsed, 5.0)


def test_criterion_4_convergence_rates():
    t0 = time.perf_counter()
    case = example_case("ex2", k1=1, k2=1)
    results = {}
    for p, target_loc, tol_loc, target_L, tol_L in (
        (2, 2.0, 0.2, 1.0, 0.2),
        (3, 3.0, 0.3, 2.0, 0.3),
    ):
        cfg = LoopConfig(
            p=p, q=p + 1, flux_coarsening=1, n_ref0=1, n_ref=5, uniform=True,
            with_majorant=False, with_advanced=False, with_identity=False,
        )
        records = adaptive_loop(case, cfg)
        hs = [r.h_max for r in records]
        r_loc = eoc([r.report.triple_loc for r in records], hs)[-3:]
        r_L = eoc([r.report.triple_L for r in records], hs)[-3:]
        results[p] = (
            all(abs(r - target_loc) <= tol_loc for r in r_loc)
            and all(abs(r - target_L) <= tol_L for r in r_L),
            r_loc, r_L,
        )
    elapsed = time.perf_counter() - t0
    ok = all(v[0] for v in results.values())
    detail = "; ".join(
        f"p={p}: loc {['%.2f' % r for r in v[1]]} L {['%.2f' % r for r in v[2]]}"
        for p, v in results.items()
    )
    gate(4, ok, detail, elapsed, 180.0)


def test_criterion_5_majorant_sharpness():
    t0 = time.perf_counter()
    case = example_case("ex1")
    cfg = LoopConfig(
        p=2, q=3, flux_coarsening=5, n_ref0=1, n_ref=8,
        marking=MarkingConfig(sigma=0.4), with_identity=False,
    )
    records = adaptive_loop(case, cfg)
    final = records[-1].report
    ok = 1.0 - 1e-8 <= final.ieff_MI <= 3.0 and 1.0 - 1e-8 <= final.ieff_MII <= 2.0
    elapsed = time.perf_counter() - t0
    gate(5, ok,
         f"final I_eff(M_I) = {final.ieff_MI:.3f} in [1, 3], "
         f"I_eff(M_II) = {final.ieff_MII:.3f} in [1, 2]",
         elapsed, 180.0)


def _norm_matrix(space, geo, cfg):
    """Gram matrix of the scheme norm |||.|||_loc,h (squared form)."""
    rule = gauss_rule(max(space.degrees) + 2, space.dim)
    elements = element_data(space, geo, rule)
    deltas = compute_deltas(elements, cfg)
    d = geo.dim - 1
    n = space.ndof
    N = np.zeros((n, n))
    for ed in elements:
        gg = np.einsum("qai,qaj->ij",
                       ed.grad[:, :d, :] * ed.wdet[:, None, None],
                       ed.grad[:, :d, :])
        dtdt = np.einsum("qi,qj->ij", ed.dt * ed.wdet[:, None], ed.dt)
        N[np.ix_(ed.funcs, ed.funcs)] += gg + deltas[ed.key] * dtdt
    for fd in face_data(space, geo, rule, at_end=True):
        mass = np.einsum("qi,qj->ij", fd.vals * fd.wface[:, None], fd.vals)
        N[np.ix_(fd.funcs, fd.funcs)] += 0.5 * mass
    return N


def test_criterion_6_coercivity_positive_definiteness():
    t0 = time.perf_counter()
    meshes = []
    for nspans in (2, 8, 16):
        meshes.append(("unit_interval_time", bezier_space(2, 2, nspans)))
    adaptive = bezier_space(2, 2, 4)
    adaptive = refine_marked(adaptive, {(0, (0, 0)), (0, (3, 3))})
    adaptive = refine_marked(adaptive, {(1, (0, 0))})
    meshes.append(("unit_interval_time", adaptive))
    meshes.append(("unit_square_time", bezier_space(2, 3, 4)))
    kv = uniform_kv(2, 2)
    meshes.append(
        ("quarter_annulus_time", HierarchicalSplineSpace.from_knots([kv] * 3))
    )
    rng = np.random.default_rng(42)
    min_eig = np.inf
    min_ratio = np.inf
    for patch, space in meshes:
        geo = benchmark_patch(patch)
        d = geo.dim - 1
        assert space.ndof <= 2000
        cfg = StabilizationConfig(d=d, degree=2, use_paper_bound=True)
        system = assemble_stabilized_system(
            space, geo, lambda xi, geo, gdata=None: np.zeros(len(xi)), cfg
        )
        system = impose_dirichlet(
            system, lambda xi, geo: np.zeros(len(xi))
        )
        A = system.free_block().toarray()
        eig = scipy.linalg.eigvalsh(0.5 * (A + A.T))[0]
        min_eig = min(min_eig, eig)
        N = _norm_matrix(space, geo, cfg)
        K = system.K_raw.toarray()
        free = system.free
        for _ in range(100):
            v = np.zeros(space.ndof)
            v[free] = rng.standard_normal(free.size)
            a_vv = float(v @ K @ v)
            n_vv = float(v @ N @ v)
            min_ratio = min(min_ratio, a_vv / n_vv)
    elapsed = time.perf_counter() - t0
    gate(6, min_eig > 0 and min_ratio >= 0.5 - 1e-10,
         f"min eig of symmetric free block {min_eig:.3e} > 0, "
         f"min a(v,v)/|||v|||^2 = {min_ratio:.3f} >= 0.5",
         elapsed, 60.0)


def test_criterion_7_flux_stationarity():
    t0 = time.perf_counter()
    case = example_case("ex2", k1=1, k2=1)
    geo = case.make_patch()
    space = HierarchicalSplineSpace.from_knots(
        [uniform_kv(2, 2), uniform_kv(2, 1)]
    )
    assert space.mesh.ncells() == 2
    cfg = StabilizationConfig(d=1, degree=2)
    system = impose_dirichlet(
        assemble_stabilized_system(space, geo, case.source, cfg), case.boundary
    )
    uh = system.solve()
    flux = build_flux_space(space, geo, degree=2, coarsening=1)
    rep = majorant_I(space, geo, uh, case.source, case.C_F, flux, iters=6)
    rule = gauss_rule(4, 2)
    boxes = _overlay_data(space, flux.scalar, geo, rule)

    def value_at(y):
        md2 = meq2 = 0.0
        for od in boxes:
            gradu = np.einsum("qan,n->qa", od.pgrad, uh[od.pfuncs])
            f_q = case.source(od.xi, geo, od.gdata)
            yv = od.avals @ y[od.afuncs]
            dyv = od.agrad[:, 0, :] @ y[od.afuncs]
            md2 += float(np.sum(od.wdet * (yv - gradu[:, 0]) ** 2))
            meq2 += float(np.sum(od.wdet * (dyv + f_q - gradu[:, 1]) ** 2))
        return (1 + rep.beta) * md2 + (1 + 1 / rep.beta) * case.C_F**2 * meq2

    base = value_at(rep.flux_coeffs)
    ok = True
    for k in range(flux.ndof):
        for s in (1e-4, -1e-4):
            y = rep.flux_coeffs.copy()
            y[k] += s
            if value_at(y) < base - 1e-13:
                ok = False
    elapsed = time.perf_counter() - t0
    gate(7, ok, "perturbing any converged flux coefficient increases M_I",
         elapsed, 5.0)


def test_criterion_8_adaptive_localization():
    t0 = time.perf_counter()
    details = []
    ok = True

    # Example 3: marked cells cluster at the peak
    case = example_case("ex3")
    cfg = LoopConfig(p=2, q=3, flux_coarsening=1, n_ref0=3, n_ref=4,
                     marking=MarkingConfig(sigma=0.4),
                     with_advanced=False, with_identity=False)
    records = adaptive_loop(case, cfg)
    peak = np.array([0.8, 0.05])
    for rec in records[3:]:
        centers = []
        for lv, cell in sorted(rec.marks_majorant):
            box = [r for r in rec.snapshot if r[:2] == (lv, cell)][0][2]
            centers.append(0.5 * (box[:, 0] + box[:, 1]))
        dist = np.linalg.norm(np.array(centers) - peak, axis=1)
        frac = float(np.mean(dist <= 0.25))
        details.append(f"ex3 step {rec.step}: peak fraction {frac:.2f}")
        if frac < 0.5:
            ok = False

    # Example 4: finest cells hug the singular slice t = 1 (tau = 0.5)
    for lam in (0.5, 1.0, 1.5):
        case = example_case("ex4", lam=lam)
        cfg = LoopConfig(p=2, q=3, flux_coarsening=1, n_ref0=1, n_ref=5,
                         marking=MarkingConfig(sigma=0.4),
                         with_advanced=False, with_identity=False)
        records = adaptive_loop(case, cfg)
        final = records[-1]
        top = max(lv for lv, cell, box in final.snapshot)
        touching = total = 0
        for lv, cell, box in final.snapshot:
            if lv == top:
                total += 1
                if box[1, 0] <= 0.5 <= box[1, 1]:
                    touching += 1
        frac = touching / total
        details.append(f"ex4(lam={lam}) finest-at-t=1 fraction {frac:.2f}")
        if frac <= 0.5:
            ok = False

    # Example 2-1: majorant-driven marks overlap exact-error marks
    case = example_case("ex2", k1=1, k2=1)
    cfg = LoopConfig(p=2, q=3, flux_coarsening=1, n_ref0=3, n_ref=6,
                     marking=MarkingConfig(sigma=0.4),
                     with_advanced=False, with_identity=False)
    records = adaptive_loop(case, cfg)
    for rec in records[3:7]:
        inter = rec.marks_majorant & rec.marks_exact
        overlap = len(inter) / len(rec.marks_exact)
        details.append(f"ex2-1 step {rec.step}: overlap {overlap:.2f}")
        if overlap < 0.6:
            ok = False

    elapsed = time.perf_counter() - t0
    gate(8, ok, "; ".join(details), elapsed, 300.0)


def _naive_basis_der(knots, p, i, k, x):
    """k-th derivative of B_{i,p} by the literal recursion formulas."""
    if k == 0:
        if p == 0:
            last = knots[i + 1] == knots[-1]
            inside = knots[i] <= x < knots[i + 1] or (last and x == knots[i + 1])
            return 1.0 if inside else 0.0
        d1 = knots[i + p] - knots[i]
        d2 = knots[i + p + 1] - knots[i + 1]
        a = (x - knots[i]) / d1 * _naive_basis_der(knots, p - 1, i, 0, x) if d1 > 0 else 0.0
        b = ((knots[i + p + 1] - x) / d2 * _naive_basis_der(knots, p - 1, i + 1, 0, x)
             if d2 > 0 else 0.0)
        return a + b
    d1 = knots[i + p] - knots[i]
    d2 = knots[i + p + 1] - knots[i + 1]
    a = p / d1 * _naive_basis_der(knots, p - 1, i, k - 1, x) if d1 > 0 else 0.0
    b = p / d2 * _naive_basis_der(knots, p - 1, i + 1, k - 1, x) if d2 > 0 else 0.0
    return a - b


def test_criterion_9_oracle_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    for p, dim in itertools.product((2, 3), (2, 3)):
        d = dim - 1
        patch = "unit_interval_time" if d == 1 else "unit_square_time"
        geo = benchmark_patch(patch)
        space = bezier_space(p, dim, nspans=1)
        cfg = StabilizationConfig(d=d, degree=p, use_paper_bound=False, theta=0.1)
        rule = gauss_rule(p + 2, dim)
        blocks = element_matrices(space, geo, cfg, rule, 0, (0,) * dim)
        knots = np.array([0.0] * (p + 1) + [1.0] * (p + 1))
        nodes, weights = np.polynomial.legendre.leggauss(2 * p + 2)
        nodes = 0.5 * (nodes + 1)
        weights = 0.5 * weights
        nfun = p + 1
        idx = list(itertools.product(*([range(nfun)] * dim)))
        n = len(idx)
        ref = {key: np.zeros((n, n)) for key in
               ("dt_v", "grad_grad", "dt_dt", "lap_dt")}

        def tens(i, orders, pt):
            val = 1.0
            for a in range(dim):
                val *= _naive_basis_der(knots, p, i[a], orders[a], pt[a])
            return val

        for qpt in itertools.product(*([range(len(nodes))] * dim)):
            pt = [nodes[k] for k in qpt]
            w = np.prod([weights[k] for k in qpt])
            vals = np.array([tens(i, (0,) * dim, pt) for i in idx])
            dt = np.array(
                [tens(i, tuple(int(a == dim - 1) for a in range(dim)), pt)
                 for i in idx]
            )
            grads = np.array(
                [[tens(i, tuple(int(b == a) for b in range(dim)), pt)
                  for i in idx] for a in range(d)]
            )
            laps = np.zeros(n)
            for a in range(d):
                orders = tuple(2 * int(b == a) for b in range(dim))
                laps += np.array([tens(i, orders, pt) for i in idx])
            ref["dt_v"] += w * np.outer(vals, dt)
            ref["grad_grad"] += w * sum(np.outer(grads[a], grads[a])
                                        for a in range(d))
            ref["dt_dt"] += w * np.outer(dt, dt)
            ref["lap_dt"] += w * np.outer(dt, laps)
        for key in ref:
            worst = max(worst, float(np.max(np.abs(blocks[key] - ref[key]))))
    elapsed = time.perf_counter() - t0
    gate(9, worst <= 1e-12,
         f"element matrices match brute-force quadrature (max dev {worst:.2e})",
         elapsed, 30.0)


def test_criterion_10_quarter_annulus_smoke():
    t0 = time.perf_counter()
    case = example_case("ex5")
    cfg = LoopConfig(p=2, q=3, flux_coarsening=2, n_ref0=1, n_ref=3,
                     marking=MarkingConfig(sigma=0.4), with_advanced=False)
    records = adaptive_loop(case, cfg)
    ok = len(records) == 4
    details = [f"{len(records)} steps"]
    for rec in records:
        rep = rec.report
        if rep.MI < rep.triple**2 * (1 - 1e-8):
            ok = False
            details.append(f"step {rec.step}: bound violated")
        if abs(rep.ieff_EId - 1.0) > 1e-5:
            ok = False
            details.append(f"step {rec.step}: identity off ({rep.ieff_EId:.6f})")
        sigma = cfg.marking.sigma
        total = sum(rec.eta2.values())
        msum = sum(rec.eta2[k] for k in rec.marks_majorant)
        smallest = min(rec.eta2[k] for k in rec.marks_majorant)
        if msum < sigma * total or msum - smallest >= sigma * total:
            ok = False
            details.append(f"step {rec.step}: marking not minimal")
    elapsed = time.perf_counter() - t0
    gate(10, ok, "; ".join(details) or "all invariants hold", elapsed, 600.0)
