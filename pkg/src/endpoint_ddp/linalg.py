"""Small dense factorizations with an instrumentation counter.

Every routine that *factorizes* a matrix goes through this module and bumps
``FACTORIZATIONS``. Triangular solves against stored factors do not. The
endpoint-dependent Riccati sweep is required to reuse the factors of the
endpoint-independent sweep, and the counter is how the test suite checks it.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import NotPositiveDefinite

EPS = np.finfo(float).eps

(_potrs,) = sla.get_lapack_funcs(("potrs",), (np.zeros(1),))

FACTORIZATIONS: Counter[str] = Counter()


def reset_factorization_count() -> None:
    FACTORIZATIONS.clear()


def factorization_count() -> int:
    return sum(FACTORIZATIONS.values())


def default_rank_tol(shape: tuple[int, ...]) -> float:
    return max(max(shape, default=1), 1) * EPS


def cholesky(matrix: np.ndarray, *, rank_tol: float | None = None) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    With ``rank_tol`` set, a factor whose smallest squared pivot falls below
    ``rank_tol`` times the largest is rejected as numerically singular, which
    LAPACK alone would accept.
    """
    FACTORIZATIONS["cholesky"] += 1
    n = matrix.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    try:
        lower = np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    d = np.diag(lower) ** 2
    if not np.all(np.isfinite(d)):
        raise NotPositiveDefinite("non-finite Cholesky pivot")
    if rank_tol is not None and d.min() <= rank_tol * d.max():
        raise NotPositiveDefinite(f"Cholesky pivot ratio {d.min() / d.max():.3e} below {rank_tol:.1e}")
    return lower


def cho_solve(lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if lower.shape[0] == 0:
        return np.zeros_like(rhs, dtype=float)
    sol, info = _potrs(lower, rhs, lower=1)
    if info != 0:
        raise ValueError(f"potrs failed with info={info}")
    return sol


def qr_pivoted(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Householder QR with column pivoting: ``matrix[:, piv] = Q @ R``."""
    FACTORIZATIONS["qr"] += 1
    q, r, piv = sla.qr(matrix, pivoting=True, check_finite=False)
    return q, r, piv


def qr(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    FACTORIZATIONS["qr"] += 1
    return sla.qr(matrix, check_finite=False)


def lu_full_pivot(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian elimination with complete pivoting.

    Returns ``(row_perm, col_perm, L, U)`` such that
    ``matrix[row_perm][:, col_perm] = L @ U`` with ``L`` unit lower
    trapezoidal (m x p) and ``U`` upper trapezoidal (p x n), p = min(m, n).
    """
    FACTORIZATIONS["lu"] += 1
    a = np.array(matrix, dtype=float, copy=True)
    m, n = a.shape
    p = min(m, n)
    rows = np.arange(m)
    cols = np.arange(n)
    for k in range(p):
        sub = np.abs(a[k:, k:])
        i, j = np.unravel_index(np.argmax(sub), sub.shape)
        i += k
        j += k
        if i != k:
            a[[k, i], :] = a[[i, k], :]
            rows[[k, i]] = rows[[i, k]]
        if j != k:
            a[:, [k, j]] = a[:, [j, k]]
            cols[[k, j]] = cols[[j, k]]
        pivot = a[k, k]
        if pivot == 0.0:
            break
        a[k + 1 :, k] /= pivot
        a[k + 1 :, k + 1 :] -= np.outer(a[k + 1 :, k], a[k, k + 1 :])
    lower = np.tril(a[:, :p], -1) + np.eye(m, p)
    upper = np.triu(a[:p, :])
    return rows, cols, lower, upper


@dataclass
class RangeFactor:
    """Row-pivoted LU of a tall matrix ``G`` (m x r) with full column rank.

    ``G`` may have redundant rows (m > r). ``solve`` returns the unique ``v``
    with ``G v = b`` for consistent ``b``; ``solve_transpose`` returns the
    basic solution of the underdetermined ``G^T g = s``.
    """

    perm: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def factor(cls, g: np.ndarray) -> RangeFactor:
        FACTORIZATIONS["lu"] += 1
        m, r = g.shape
        if r == 0:
            return cls(np.arange(m), np.zeros((0, 0)), np.zeros((0, 0)))
        p, lower, upper = sla.lu(g, check_finite=False)
        perm = np.argmax(p, axis=0)  # g = p @ l @ u, so (p.T @ g)[i] = g[perm[i]]
        return cls(perm, lower[:r], upper)

    @property
    def rank(self) -> int:
        return self.upper.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        r = self.rank
        if r == 0:
            return np.zeros((0,) + rhs.shape[1:])
        top = rhs[self.perm[:r]]
        y = sla.solve_triangular(self.lower, top, lower=True, unit_diagonal=True, check_finite=False)
        return sla.solve_triangular(self.upper, y, lower=False, check_finite=False)

    def solve_transpose(self, rhs: np.ndarray) -> np.ndarray:
        r = self.rank
        m = self.perm.shape[0]
        out = np.zeros((m,) + rhs.shape[1:])
        if r == 0:
            return out
        y = sla.solve_triangular(self.upper, rhs, lower=False, trans="T", check_finite=False)
        eta = sla.solve_triangular(self.lower, y, lower=True, unit_diagonal=True, trans="T", check_finite=False)
        out[self.perm[:r]] = eta
        return out
