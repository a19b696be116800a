"""Univariate and tensor-product B-spline bases on open knot vectors.

The evaluation routines use the stable triangular (de Boor) scheme with the
usual convention that a division by zero yields zero, so repeated knots are
handled without special cases.  All bases live on the parameter interval
[0, 1]; geometry and physics happen elsewhere, after composition with a
geometry map.
"""

import itertools

import numpy as np

__all__ = [
    "KnotVector",
    "TensorSplineSpace",
    "BasisEval",
    "eval_univariate",
    "tensor_eval",
    "dyadic_refine",
    "greville_abscissae",
    "refine_matrix",
]

#: Knots closer than this are snapped together at construction time.
KNOT_SNAP_TOL = 1e-14


class KnotVector:
    """An open knot vector on [0, 1] together with its polynomial degree.

    Attributes
    ----------
    knots : np.ndarray
        Nondecreasing knot values in [0, 1], first and last repeated
        exactly ``degree + 1`` times.
    degree : int
        Polynomial degree ``p >= 1``.
    n : int
        Number of basis functions, ``len(knots) - degree - 1``.
    """

    def __init__(self, knots, degree):
        knots = np.asarray(knots, dtype=float).copy()
        if degree < 1:
            raise ValueError(f"degree must be >= 1, got {degree}")
        if knots.ndim != 1 or knots.size < 2 * (degree + 1):
            raise ValueError("knot vector too short for the requested degree")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be nondecreasing")
        # snap nearly equal knots so dyadic refinement stays exact
        for i in range(1, knots.size):
            if 0 < knots[i] - knots[i - 1] < KNOT_SNAP_TOL:
                knots[i] = knots[i - 1]
        if knots[0] != 0.0 or knots[-1] != 1.0:
            raise ValueError("open knot vector must span [0, 1]")
        p = degree
        if np.any(knots[: p + 1] != 0.0) or np.any(knots[-(p + 1):] != 1.0):
            raise ValueError("first and last knot must have multiplicity p + 1")
        if knots.size > p + 1 and (knots[p + 1] == 0.0 or knots[-(p + 2)] == 1.0):
            raise ValueError("end-knot multiplicity exceeds p + 1")
        self.knots = knots
        self.degree = p
        self.n = knots.size - p - 1
        # distinct interior breakpoints and the nonempty spans they bound
        self.breakpoints = np.unique(knots)
        self.nspans = self.breakpoints.size - 1

    def __eq__(self, other):
        return (
            isinstance(other, KnotVector)
            and self.degree == other.degree
            and self.knots.shape == other.knots.shape
            and bool(np.all(self.knots == other.knots))
        )

    def __hash__(self):
        return hash((self.degree, self.knots.tobytes()))

    def __repr__(self):
        return f"KnotVector(p={self.degree}, n={self.n}, spans={self.nspans})"

    def multiplicities(self):
        """Multiplicity of each distinct knot, in breakpoint order."""
        return np.array([np.sum(self.knots == b) for b in self.breakpoints])

    def max_interior_multiplicity(self):
        m = self.multiplicities()
        return int(m[1:-1].max()) if m.size > 2 else 0

    def is_c1_capable(self):
        """True if the spline space is C^1 inside (0, 1)."""
        return self.degree >= 2 and self.max_interior_multiplicity() <= self.degree - 1

    def find_span(self, x):
        """Index i of the knot span with knots[i] <= x < knots[i+1].

        The right endpoint x = 1 is assigned to the last nonempty span.
        """
        p = self.degree
        if x >= self.knots[self.n]:
            i = self.n - 1
            while self.knots[i + 1] == self.knots[i]:
                i -= 1
            return i
        return int(np.searchsorted(self.knots, x, side="right") - 1)

    def span_of_cell(self, cell):
        """Knot-span index of the ``cell``-th nonempty span."""
        return self.find_span(0.5 * (self.breakpoints[cell] + self.breakpoints[cell + 1]))

    def first_func_on_cell(self, cell):
        """Index of the first of the p+1 functions supported on a cell."""
        return self.span_of_cell(cell) - self.degree

    def function_support(self, i):
        """Parameter interval (a, b) outside which basis function i vanishes."""
        return self.knots[i], self.knots[i + self.degree + 1]

    def function_cell_range(self, i):
        """Half-open range of nonempty-span indices covered by function i."""
        a, b = self.function_support(i)
        lo = int(np.searchsorted(self.breakpoints, a, side="right") - 1)
        hi = int(np.searchsorted(self.breakpoints, b, side="left"))
        return max(lo, 0), min(hi, self.nspans)


def eval_univariate(kv, x, nderiv=0, span=None):
    """Values and derivatives of the p+1 B-splines nonzero at ``x``.

    Returns ``(first, ders)`` where ``first`` is the index of the first
    nonzero function and ``ders`` has shape ``(nderiv + 1, p + 1)`` with
    ``ders[k, j]`` the k-th derivative of function ``first + j``.

    ``span`` pins the evaluation to a specific knot span; ``x`` may then sit
    on its closure, which keeps windows consistent at cell boundaries.
    """
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"parameter {x} outside [0, 1]")
    if nderiv > 2:
        raise ValueError("at most second derivatives are supported")
    if span is None:
        span = kv.find_span(x)
    ders = _all_ders(kv.knots, kv.degree, x, span, nderiv)
    return span - kv.degree, ders


def _all_ders(knots, p, x, span, nderiv):
    """Triangular-scheme evaluation of nonzero functions and derivatives.

    Divisions by zero-length spans are defined to be zero by construction:
    the triangular table never divides by a zero knot difference.
    """
    ndu = np.empty((p + 1, p + 1))
    left = np.empty(p + 1)
    right = np.empty(p + 1)
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        left[j] = x - knots[span + 1 - j]
        right[j] = knots[span + j] - x
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved
    ders = np.zeros((nderiv + 1, p + 1))
    ders[0, :] = ndu[:, p]
    if nderiv == 0:
        return ders
    a = np.empty((2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for k in range(1, nderiv + 1):
            d = 0.0
            rk = r - k
            pk = p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d += a[s2, k] * ndu[r, pk]
            ders[k, r] = d
            s1, s2 = s2, s1
    fac = float(p)
    for k in range(1, nderiv + 1):
        ders[k, :] *= fac
        fac *= p - k
    return ders


def dyadic_refine(kv):
    """Insert the midpoint of every nonempty knot span once."""
    mids = 0.5 * (kv.breakpoints[:-1] + kv.breakpoints[1:])
    knots = np.sort(np.concatenate([kv.knots, mids]))
    return KnotVector(knots, kv.degree)


def greville_abscissae(kv):
    """Greville points: means of p consecutive interior knots."""
    p = kv.degree
    return np.array([kv.knots[i + 1: i + p + 1].mean() for i in range(kv.n)])


def _insertion_matrix(knots, p, x):
    """Single-knot-insertion matrix A with c_fine = A @ c_coarse."""
    n = knots.size - p - 1
    k = int(np.searchsorted(knots, x, side="right") - 1)
    A = np.zeros((n + 1, n))
    for i in range(n + 1):
        if i <= k - p:
            A[i, i] = 1.0
        elif i >= k + 1:
            A[i, i - 1] = 1.0
        else:
            denom = knots[i + p] - knots[i]
            alpha = (x - knots[i]) / denom if denom > 0 else 0.0
            A[i, i] = alpha
            A[i, i - 1] = 1.0 - alpha
    return A


def refine_matrix(kv):
    """Two-scale matrix P of the dyadic refinement: c_fine = P @ c_coarse.

    A coarse-space spline with coefficients c is reproduced exactly on
    ``dyadic_refine(kv)`` with coefficients ``P @ c``.
    """
    knots = kv.knots.copy()
    p = kv.degree
    P = np.eye(kv.n)
    for x in 0.5 * (kv.breakpoints[:-1] + kv.breakpoints[1:]):
        A = _insertion_matrix(knots, p, x)
        P = A @ P
        knots = np.sort(np.append(knots, x))
    return P


class BasisEval:
    """Nonzero tensor-product basis values at one parameter point.

    Attributes
    ----------
    indices : list of tuple
        Multi-indices of the ``prod(p_a + 1)`` nonzero functions.
    values : np.ndarray, shape (nloc,)
    grad : np.ndarray, shape (nloc, D) or None
        Partial derivatives; present when ``nderiv >= 1``.
    hess : np.ndarray, shape (nloc, D, D) or None
        Mixed second partials; present when ``nderiv == 2``.
    """

    def __init__(self, indices, values, grad=None, hess=None):
        self.indices = indices
        self.values = values
        self.grad = grad
        self.hess = hess


class TensorSplineSpace:
    """Tensor product of univariate B-spline bases, one per direction."""

    def __init__(self, kvs):
        self.kvs = tuple(kvs)
        self.dim = len(self.kvs)
        self.shape = tuple(kv.n for kv in self.kvs)
        self.ndof = int(np.prod(self.shape))
        self.nspans = tuple(kv.nspans for kv in self.kvs)
        self.ncells = int(np.prod(self.nspans))

    def __eq__(self, other):
        return isinstance(other, TensorSplineSpace) and self.kvs == other.kvs

    def __repr__(self):
        degs = tuple(kv.degree for kv in self.kvs)
        return f"TensorSplineSpace(p={degs}, shape={self.shape})"

    @property
    def degrees(self):
        return tuple(kv.degree for kv in self.kvs)

    def refine(self):
        return TensorSplineSpace([dyadic_refine(kv) for kv in self.kvs])

    def ravel(self, index):
        """Flat index of a multi-index (C order)."""
        return int(np.ravel_multi_index(index, self.shape))

    def cells(self):
        """All cell multi-indices (nonempty spans per direction)."""
        return itertools.product(*(range(m) for m in self.nspans))

    def cell_box(self, cell):
        """Parameter bounds of a cell as a (D, 2) array."""
        return np.array(
            [(kv.breakpoints[c], kv.breakpoints[c + 1]) for kv, c in zip(self.kvs, cell)]
        )

    def cell_of_point(self, point):
        """Multi-index of the cell containing a parameter point."""
        return tuple(
            min(int(np.searchsorted(kv.breakpoints, x, side="right") - 1), kv.nspans - 1)
            for kv, x in zip(self.kvs, point)
        )

    def functions_on_cell(self, cell):
        """Multi-indices of the functions supported on a cell, C order."""
        firsts = [kv.first_func_on_cell(c) for kv, c in zip(self.kvs, cell)]
        degs = self.degrees
        return list(
            itertools.product(*(range(f, f + p + 1) for f, p in zip(firsts, degs)))
        )

    def function_support_cells(self, index):
        """Half-open per-direction cell ranges covered by a function."""
        return tuple(kv.function_cell_range(i) for kv, i in zip(self.kvs, index))

    def greville_point(self, index):
        return np.array(
            [kv.knots[i + 1: i + kv.degree + 1].mean() for kv, i in zip(self.kvs, index)]
        )

    def eval_point(self, point, nderiv=0, spans=None):
        """Univariate evaluations at one point, per direction.

        Returns ``(firsts, ders)`` with ``ders[a]`` of shape
        ``(nderiv + 1, p_a + 1)``.
        """
        firsts, ders = [], []
        for a, (kv, x) in enumerate(zip(self.kvs, point)):
            f, d = eval_univariate(kv, x, nderiv, None if spans is None else spans[a])
            firsts.append(f)
            ders.append(d)
        return firsts, ders


def tensor_eval(space, point, nderiv=0, spans=None):
    """Evaluate the nonzero multivariate basis functions at one point.

    Values are products of univariate values; derivatives follow from the
    product rule.  Returns a :class:`BasisEval`.
    """
    point = np.atleast_1d(np.asarray(point, dtype=float))
    if point.size != space.dim:
        raise ValueError(f"expected a point in R^{space.dim}, got {point.size} coords")
    firsts, ders = space.eval_point(point, nderiv, spans)
    D = space.dim
    indices = list(
        itertools.product(*(range(f, f + kv.degree + 1) for f, kv in zip(firsts, space.kvs)))
    )
    vals_1d = [d[0] for d in ders]
    values = vals_1d[0]
    for a in range(1, D):
        values = np.multiply.outer(values, vals_1d[a])
    values = values.ravel()
    grad = hess = None
    if nderiv >= 1:
        grad = np.empty((len(indices), D))
        for a in range(D):
            factors = [ders[b][1] if b == a else ders[b][0] for b in range(D)]
            acc = factors[0]
            for b in range(1, D):
                acc = np.multiply.outer(acc, factors[b])
            grad[:, a] = acc.ravel()
    if nderiv >= 2:
        hess = np.empty((len(indices), D, D))
        for a in range(D):
            for b in range(a, D):
                factors = []
                for c in range(D):
                    k = (c == a) + (c == b)
                    factors.append(ders[c][k])
                acc = factors[0]
                for c in range(1, D):
                    acc = np.multiply.outer(acc, factors[c])
                hess[:, a, b] = acc.ravel()
                hess[:, b, a] = hess[:, a, b]
    return BasisEval(indices, values, grad, hess)
