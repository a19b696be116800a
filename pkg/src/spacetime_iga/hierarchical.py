"""Truncated hierarchical B-spline (THB) spaces over nested dyadic levels.

A :class:`HierarchicalMesh` partitions the parameter cube into active cells
drawn from a hierarchy of dyadically refined tensor grids; a
:class:`HierarchicalSplineSpace` selects active basis functions level by
level and represents each one, restricted to an active cell, through a
truncated two-scale expansion in that cell's tensor-product basis.  The
truncated basis is a nonnegative partition of unity.

Meshes enforce class-2 admissibility: the support extension of an active
cell overlaps active cells of the neighbouring levels only.  Refinement is
isotropic (all directions halve together) and marked sets are closed under
the admissibility rule automatically.
"""

import itertools
import warnings

import numpy as np
import scipy.sparse as sp

from .splines import KnotVector, TensorSplineSpace, eval_univariate, tensor_eval

__all__ = [
    "HierarchicalMesh",
    "HierarchicalSplineSpace",
    "refine_marked",
    "eval_active",
    "space_dimension",
    "active_functions_on_cell",
    "coarsen_mesh",
    "MAX_LEVELS",
]

#: Refinement beyond this many levels is ignored (parameter-width guard).
MAX_LEVELS = 12


def _sparse_refine_matrix(kv):
    """Sparse two-scale matrix for one dyadic refinement of ``kv``."""
    knots = kv.knots.copy()
    p = kv.degree
    P = sp.identity(kv.n, format="csr")
    for x in 0.5 * (kv.breakpoints[:-1] + kv.breakpoints[1:]):
        n = knots.size - p - 1
        k = int(np.searchsorted(knots, x, side="right") - 1)
        rows, cols, vals = [], [], []
        for i in range(n + 1):
            if i <= k - p:
                rows.append(i), cols.append(i), vals.append(1.0)
            elif i >= k + 1:
                rows.append(i), cols.append(i - 1), vals.append(1.0)
            else:
                denom = knots[i + p] - knots[i]
                alpha = (x - knots[i]) / denom if denom > 0 else 0.0
                if alpha != 0.0:
                    rows.append(i), cols.append(i), vals.append(alpha)
                if alpha != 1.0:
                    rows.append(i), cols.append(i - 1), vals.append(1.0 - alpha)
        A = sp.csr_matrix((vals, (rows, cols)), shape=(n + 1, n))
        P = A @ P
        knots = np.sort(np.append(knots, x))
    return P.tocsr()


def _children(cell):
    return list(itertools.product(*((2 * c, 2 * c + 1) for c in cell)))


def _ancestor(cell, steps):
    return tuple(c >> steps for c in cell)


class HierarchicalMesh:
    """Nested dyadic cell grids with a distinguished set of active cells.

    The active cells of all levels together partition the parameter cube;
    each cell is active on at most one level.  ``active[lv]`` and
    ``deactivated[lv]`` are sets of per-level cell multi-indices, where a
    deactivated cell has been replaced by its ``2**dim`` children.
    """

    def __init__(self, space0):
        self.dim = space0.dim
        self.levels = [space0]
        self.active = [set(space0.cells())]
        self.deactivated = [set()]

    @property
    def nlevels(self):
        return len(self.levels)

    def copy(self):
        out = HierarchicalMesh.__new__(HierarchicalMesh)
        out.dim = self.dim
        out.levels = list(self.levels)
        out.active = [set(s) for s in self.active]
        out.deactivated = [set(s) for s in self.deactivated]
        return out

    def active_cells(self):
        """All active cells as (level, multi-index) pairs, canonical order."""
        return [
            (lv, c)
            for lv in range(self.nlevels)
            for c in sorted(self.active[lv])
        ]

    def ncells(self):
        return sum(len(a) for a in self.active)

    def cell_box(self, lv, cell):
        return self.levels[lv].cell_box(cell)

    def _ensure_level(self, lv):
        while self.nlevels <= lv:
            self.levels.append(self.levels[-1].refine())
            self.active.append(set())
            self.deactivated.append(set())

    def support_extension_box(self, lv, cell):
        """Parameter box swept by supports of basis functions seen on a cell."""
        space = self.levels[lv]
        box = np.empty((self.dim, 2))
        for a, (kv, c) in enumerate(zip(space.kvs, cell)):
            box[a, 0] = kv.breakpoints[max(0, c - kv.degree)]
            box[a, 1] = kv.breakpoints[min(kv.nspans, c + kv.degree + 1)]
        return box

    def cells_overlapping_box(self, lv, box):
        """Active level-``lv`` cells with positive-measure overlap with a box."""
        space = self.levels[lv]
        ranges = []
        for a, kv in enumerate(space.kvs):
            lo = int(np.searchsorted(kv.breakpoints, box[a, 0], side="right") - 1)
            hi = int(np.searchsorted(kv.breakpoints, box[a, 1], side="left"))
            ranges.append(range(max(lo, 0), min(hi, kv.nspans)))
        return [c for c in itertools.product(*ranges) if c in self.active[lv]]

    def point_cell(self, point):
        """Active cell (level, index) whose closure contains a point."""
        lv = 0
        cell = self.levels[0].cell_of_point(point)
        while cell not in self.active[lv]:
            if cell not in self.deactivated[lv]:
                raise ValueError(f"point {point} not covered by the active mesh")
            box = self.cell_box(lv, cell)
            mid = 0.5 * (box[:, 0] + box[:, 1])
            cell = tuple(2 * c + int(x > m) for c, x, m in zip(cell, point, mid))
            lv += 1
        return lv, cell

    def _admissibility_marks(self):
        """Coarse cells violating class-2 admissibility, to be refined."""
        marks = set()
        for lv in range(self.nlevels):
            for cell in self.active[lv]:
                ext = self.support_extension_box(lv, cell)
                for m in range(self.nlevels):
                    if abs(m - lv) <= 1:
                        continue
                    for other in self.cells_overlapping_box(m, ext):
                        if m < lv:
                            marks.add((m, other))
                        else:
                            marks.add((lv, cell))
        return marks

    def _subdivide(self, marked):
        """Replace marked active cells by their children (in place)."""
        done = set()
        for lv, cell in marked:
            if cell not in self.active[lv]:
                continue
            if lv + 1 >= MAX_LEVELS:
                warnings.warn(
                    f"refinement beyond {MAX_LEVELS} levels ignored", stacklevel=3
                )
                continue
            self._ensure_level(lv + 1)
            self.active[lv].discard(cell)
            self.deactivated[lv].add(cell)
            self.active[lv + 1].update(_children(cell))
            done.add((lv, cell))
        return done

    def refine(self, marked):
        """New mesh with marked cells replaced by children, plus closure."""
        marked = set(marked)
        if not marked:
            return self
        for lv, cell in marked:
            if cell not in self.active[lv]:
                raise ValueError(f"cell {cell} is not active on level {lv}")
        out = self.copy()
        out._subdivide(marked)
        while True:
            closure = out._admissibility_marks()
            if not out._subdivide(closure):
                break
        return out

    def is_admissible(self):
        return not self._admissibility_marks()

    def check_partition(self, samples=500, seed=0):
        """Sampled check that active cells cover the cube exactly once."""
        rng = np.random.default_rng(seed)
        for point in rng.uniform(0, 1, (samples, self.dim)):
            self.point_cell(point)  # raises if uncovered
        volume = sum(
            float(np.prod(self.cell_box(lv, c)[:, 1] - self.cell_box(lv, c)[:, 0]))
            for lv, c in self.active_cells()
        )
        return abs(volume - 1.0) < 1e-10


class HierarchicalSplineSpace:
    """THB-spline space over a hierarchical mesh.

    Active functions follow the hierarchical selection rule: a level-``lv``
    function is active iff its support meets an active level-``lv`` cell and
    is contained in cells of level >= ``lv``.  Function values on a cell are
    produced through per-cell extraction matrices that encode truncation.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        self.dim = mesh.dim
        self._select_active_functions()
        self.functions = [
            (lv, idx)
            for lv in range(mesh.nlevels)
            for idx in sorted(self.active_funcs[lv])
        ]
        self.global_index = {f: i for i, f in enumerate(self.functions)}
        self._refine_1d = {}
        self._extraction = {}

    # -- construction -----------------------------------------------------

    @classmethod
    def from_knots(cls, kvs):
        """Single-level space over the tensor mesh of the given knot vectors."""
        return cls(HierarchicalMesh(TensorSplineSpace(kvs)))

    @property
    def ndof(self):
        return len(self.functions)

    @property
    def degrees(self):
        return self.mesh.levels[0].degrees

    def _covered_at_or_below(self, lv, cell):
        """True if a level-``lv`` cell is active or subdivided further."""
        return cell in self.mesh.active[lv] or cell in self.mesh.deactivated[lv]

    def _select_active_functions(self):
        mesh = self.mesh
        self.active_funcs = []
        for lv in range(mesh.nlevels):
            space = mesh.levels[lv]
            chosen = set()
            candidates = set()
            for cell in mesh.active[lv]:
                candidates.update(space.functions_on_cell(cell))
            for idx in candidates:
                ranges = space.function_support_cells(idx)
                cells = itertools.product(*(range(lo, hi) for lo, hi in ranges))
                if all(self._covered_at_or_below(lv, c) for c in cells):
                    chosen.add(idx)
            self.active_funcs.append(chosen)

    # -- two-scale machinery ----------------------------------------------

    def _refine_matrix_1d(self, lv, axis):
        key = (lv, axis)
        if key not in self._refine_1d:
            self._refine_1d[key] = _sparse_refine_matrix(self.mesh.levels[lv].kvs[axis])
        return self._refine_1d[key]

    def _window(self, lv, cell):
        """Per-direction index windows of functions supported on a cell."""
        space = self.mesh.levels[lv]
        return [
            range(kv.first_func_on_cell(c), kv.first_func_on_cell(c) + kv.degree + 1)
            for kv, c in zip(space.kvs, cell)
        ]

    def cell_extraction(self, lv, cell):
        """Active functions visible on a cell and their extraction matrix.

        Returns ``(funcs, C)`` where ``funcs`` lists (level, index) pairs in
        canonical order and ``C`` has shape ``(len(funcs), prod(p_a + 1))``:
        row k holds the coefficients of function k in the level-``lv``
        tensor basis restricted to the cell (C-ordered window).
        """
        key = (lv, cell)
        if key in self._extraction:
            return self._extraction[key]
        degs = self.degrees
        nloc = int(np.prod([p + 1 for p in degs]))
        windows = {lv: self._window(lv, cell)}
        anc = {lv: cell}
        for m in range(lv - 1, -1, -1):
            anc[m] = _ancestor(anc[m + 1], 1)
            windows[m] = self._window(m, anc[m])
        rows = {}
        for m in range(lv + 1):
            win_funcs = [
                idx
                for idx in itertools.product(*windows[m])
                if idx in self.active_funcs[m]
            ]
            for idx in win_funcs:
                c = np.zeros([p + 1 for p in degs])
                pos = tuple(w.index(i) for w, i in zip(windows[m], idx))
                c[pos] = 1.0
                for k in range(m, lv):
                    blocks = []
                    for a in range(self.dim):
                        P = self._refine_matrix_1d(k, a)
                        blocks.append(
                            P[np.ix_(list(windows[k + 1][a]), list(windows[k][a]))].toarray()
                        )
                    for a, B in enumerate(blocks):
                        c = np.moveaxis(np.tensordot(B, c, axes=(1, a)), 0, a)
                    for jdx in itertools.product(*windows[k + 1]):
                        if jdx in self.active_funcs[k + 1]:
                            pos = tuple(
                                w.index(i) for w, i in zip(windows[k + 1], jdx)
                            )
                            c[pos] = 0.0
                flat = c.ravel()
                if np.any(flat != 0.0):
                    rows[(m, idx)] = flat
        funcs = sorted(rows.keys())
        C = np.array([rows[f] for f in funcs]).reshape(len(funcs), nloc)
        self._extraction[key] = (funcs, C)
        return funcs, C

    # -- evaluation --------------------------------------------------------

    def _grid_1d(self, lv, axis, cell_1d, coords, nderiv):
        """Univariate values/derivatives at coords in one cell's closure."""
        kv = self.mesh.levels[lv].kvs[axis]
        span = kv.span_of_cell(cell_1d)
        out = np.empty((coords.size, nderiv + 1, kv.degree + 1))
        for i, x in enumerate(coords):
            _, ders = eval_univariate(kv, float(x), nderiv, span)
            out[i] = ders
        return out

    def eval_cell_grid(self, lv, cell, coords1d, nderiv=1):
        """Tensor-basis data on the grid of per-direction coordinates.

        ``coords1d`` is a list of per-direction coordinate arrays; the grid
        is traversed in C order, matching tensorized quadrature rules.
        Returns ``(values, grad, hess)`` with shapes (nq, nloc),
        (nq, D, nloc) and (nq, D, D, nloc) (grad/hess None if not requested).
        """
        D = self.dim
        U = [
            self._grid_1d(lv, a, cell[a], np.asarray(coords1d[a]), nderiv)
            for a in range(D)
        ]

        def combine(orders):
            acc = None
            for a in range(D):
                cur = U[a][:, orders[a], :]
                if acc is None:
                    acc = cur
                else:
                    acc = acc[:, None, :, None] * cur[None, :, None, :]
                    acc = acc.reshape(acc.shape[0] * acc.shape[1], -1)
            return acc

        values = combine((0,) * D)
        grad = hess = None
        if nderiv >= 1:
            nq, nloc = values.shape
            grad = np.empty((nq, D, nloc))
            for a in range(D):
                orders = tuple(1 if b == a else 0 for b in range(D))
                grad[:, a, :] = combine(orders)
        if nderiv >= 2:
            hess = np.empty((nq, D, D, nloc))
            for a in range(D):
                for b in range(a, D):
                    orders = tuple((c == a) + (c == b) for c in range(D))
                    hess[:, a, b, :] = combine(orders)
                    hess[:, b, a, :] = hess[:, a, b, :]
        return values, grad, hess

    def eval_on_cell(self, lv, cell, points, nderiv=1):
        """Active-function data at arbitrary points inside one active cell.

        Returns ``(funcs, values, grad, hess)`` where values has shape
        (nq, nact); grad (nq, D, nact); hess (nq, D, D, nact).
        """
        funcs, C = self.cell_extraction(lv, cell)
        points = np.atleast_2d(points)
        space = self.mesh.levels[lv]
        spans = [kv.span_of_cell(c) for kv, c in zip(space.kvs, cell)]
        nloc = C.shape[1]
        nq = points.shape[0]
        vals = np.empty((nq, nloc))
        grad = np.empty((nq, self.dim, nloc)) if nderiv >= 1 else None
        hess = np.empty((nq, self.dim, self.dim, nloc)) if nderiv >= 2 else None
        for q, pt in enumerate(points):
            be = tensor_eval(space, pt, nderiv, spans)
            vals[q] = be.values
            if nderiv >= 1:
                grad[q] = be.grad.T
            if nderiv >= 2:
                hess[q] = np.moveaxis(be.hess, 0, -1)
        out_vals = vals @ C.T
        out_grad = np.einsum("qdn,an->qda", grad, C) if nderiv >= 1 else None
        out_hess = np.einsum("qden,an->qdea", hess, C) if nderiv >= 2 else None
        return funcs, out_vals, out_grad, out_hess


def refine_marked(space, marked):
    """New THB space with the marked active cells refined (plus closure)."""
    mesh = space.mesh.refine(marked)
    if mesh is space.mesh:
        return space
    return HierarchicalSplineSpace(mesh)


def eval_active(space, point, nderiv=0):
    """Evaluate all active truncated functions nonzero at a parameter point.

    Returns ``(global_indices, values, grad, hess)``; derivative slots are
    None when not requested.  Truncated values are nonnegative and sum to 1.
    """
    point = np.asarray(point, dtype=float)
    lv, cell = space.mesh.point_cell(point)
    funcs, vals, grad, hess = space.eval_on_cell(lv, cell, point[None, :], nderiv)
    gidx = np.array([space.global_index[f] for f in funcs])
    return (
        gidx,
        vals[0],
        grad[0].T if grad is not None else None,
        np.moveaxis(hess[0], -1, 0) if hess is not None else None,
    )


def space_dimension(space):
    """Total number of active functions."""
    return space.ndof


def active_functions_on_cell(space, cell):
    """Global indices of functions whose truncated support meets a cell."""
    lv, idx = cell
    funcs, _ = space.cell_extraction(lv, idx)
    return [space.global_index[f] for f in funcs]


def coarsen_mesh(mesh, factor, degrees=None):
    """Mesh coarsened by ``factor`` relative to an adaptive primal mesh.

    Every active cell of level ``lv`` demands resolution at level
    ``max(0, lv - round(log2(factor)))``; the result is the coarsest dyadic
    partition honouring all demands.  ``degrees`` rebuilds the level-0 knot
    vectors at different polynomial degrees on the same breakpoints.
    """
    if factor < 1:
        raise ValueError("coarsening factor must be >= 1")
    shift = int(round(np.log2(factor)))
    base = mesh.levels[0]
    if degrees is not None:
        kvs = []
        for kv, q in zip(base.kvs, degrees):
            interior = []
            for b in kv.breakpoints[1:-1]:
                interior.extend([b] * min(int(np.sum(kv.knots == b)), q - 1))
            knots = np.concatenate([[0.0] * (q + 1), interior, [1.0] * (q + 1)])
            kvs.append(KnotVector(knots, q))
        base = TensorSplineSpace(kvs)
    out = HierarchicalMesh(base)
    if shift == 0 and degrees is None:
        demands = mesh.active_cells()
    else:
        demands = []
        for lv, cell in mesh.active_cells():
            dl = max(0, lv - shift)
            demands.append((dl, _ancestor(cell, lv - dl)))
    # cells at each level containing a strictly deeper demand
    deeper = [set() for _ in range(MAX_LEVELS)]
    for dl, cell in demands:
        for m in range(dl - 1, -1, -1):
            deeper[m].add(_ancestor(cell, dl - m))
    frontier = [(0, c) for c in sorted(out.active[0])]
    while frontier:
        lv, cell = frontier.pop()
        if cell in deeper[lv]:
            out._ensure_level(lv + 1)
            out.active[lv].discard(cell)
            out.deactivated[lv].add(cell)
            kids = _children(cell)
            out.active[lv + 1].update(kids)
            frontier.extend((lv + 1, k) for k in kids)
    while True:
        closure = out._admissibility_marks()
        if not out._subdivide(closure):
            break
    return out
