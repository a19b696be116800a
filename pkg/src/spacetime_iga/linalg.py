"""Sparse direct solves for the stabilized system and the flux system.

Factorization is delegated to SuperLU (fill-reducing ordering included);
this module's contract is the relative-residual bound and the detection of
lost positive definiteness in the symmetric solves.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = ["SolverError", "NotSPDError", "lu_solve", "ldlt_solve"]

RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    """Direct solve failed or produced an unacceptable residual."""


class NotSPDError(SolverError):
    """Symmetric factorization hit a nonpositive pivot (matrix not SPD)."""


def _as_csc(A):
    if not sp.issparse(A):
        A = sp.csr_matrix(np.asarray(A))
    return A.tocsc()


def _condition_estimate(A, lu):
    try:
        n = A.shape[0]
        inv_op = spla.LinearOperator((n, n), matvec=lu.solve)
        return spla.onenormest(A) * spla.onenormest(inv_op)
    except Exception:
        return np.inf


def _check_residual(A, x, b, lu):
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return
    rel = np.linalg.norm(A @ x - b) / bnorm
    if not np.isfinite(rel) or rel > RESIDUAL_TOL:
        cond = _condition_estimate(A, lu)
        raise SolverError(
            f"direct solve residual {rel:.2e} exceeds {RESIDUAL_TOL:.0e} "
            f"(condition estimate {cond:.2e})"
        )


def lu_solve(A, b):
    """Solve a general sparse system by LU with relative residual <= 1e-10."""
    A = _as_csc(A)
    b = np.asarray(b, dtype=float)
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SolverError(f"LU factorization failed: {exc}") from exc
    x = lu.solve(b)
    _check_residual(A, x, b, lu)
    return x


def ldlt_solve(A, b):
    """Solve a symmetric positive definite sparse system.

    Uses a symmetric-mode factorization without partial pivoting so that a
    nonpositive pivot signals loss of positive definiteness.
    """
    A = _as_csc(A)
    b = np.asarray(b, dtype=float)
    asym = abs(A - A.T)
    scale = max(abs(A).max(), 1.0)
    if asym.count_nonzero() and asym.max() > 1e-12 * scale:
        raise NotSPDError("matrix is not symmetric")
    try:
        lu = spla.splu(
            A,
            diag_pivot_thresh=0.0,
            permc_spec="MMD_AT_PLUS_A",
            options={"SymmetricMode": True},
        )
    except RuntimeError as exc:
        raise NotSPDError(f"factorization failed: {exc}") from exc
    pivots = lu.U.diagonal()
    if np.any(pivots <= 0.0):
        raise NotSPDError("nonpositive pivot: matrix is not positive definite")
    x = lu.solve(b)
    _check_residual(A, x, b, lu)
    return x
