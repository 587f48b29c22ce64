r"""Dense resolutions of the equality-constrained quadratic program

.. math::

    \min_w \tfrac12 w^T A w - w^T a \quad \text{s.t.} \quad B w = b,

whose KKT conditions form the saddle-point system ``[[A, B^T], [B, 0]]
[w; y] = [a; b]``. The solution always splits as ``w = w_hat - W_check y``
with ``w_hat = A^-1 a`` and ``W_check = A^-1 B^T``.

This module is deliberately dense and simple. It is the oracle the Riccati
sweeps are checked against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import linalg
from .errors import (
    DimensionMismatch,
    InconsistentConstraint,
    NotPositiveDefinite,
    SingularSchur,
    SingularSystem,
)


@dataclass(frozen=True)
class SaddleSystem:
    A: np.ndarray
    a: np.ndarray
    B: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        a = np.asarray(self.a, dtype=float).reshape(-1)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        B = np.asarray(self.B, dtype=float).reshape(b.size, a.size) if b.size == 0 else np.atleast_2d(
            np.asarray(self.B, dtype=float)
        )
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "b", b)
        n = a.size
        if A.shape != (n, n):
            raise DimensionMismatch(f"A has shape {A.shape}, expected {(n, n)}")
        if B.shape != (b.size, n):
            raise DimensionMismatch(f"B has shape {B.shape}, expected {(b.size, n)}")
        scale = np.abs(A).max(initial=0.0)
        if np.abs(A - A.T).max(initial=0.0) > 1e-12 * scale:
            raise ValueError("A is not symmetric")

    @property
    def n_w(self) -> int:
        return self.a.size

    @property
    def n_b(self) -> int:
        return self.b.size

    def kkt_matrix(self) -> np.ndarray:
        n, m = self.n_w, self.n_b
        K = np.zeros((n + m, n + m))
        K[:n, :n] = self.A
        K[:n, n:] = self.B.T
        K[n:, :n] = self.B
        return K

    def kkt_rhs(self) -> np.ndarray:
        return np.concatenate([self.a, self.b])

    def residual(self, w: np.ndarray, y: np.ndarray) -> float:
        """Max-norm residual of both KKT blocks."""
        r1 = self.A @ w + self.B.T @ y - self.a
        r2 = self.B @ w - self.b
        return float(max(np.abs(r1).max(initial=0.0), np.abs(r2).max(initial=0.0)))


@dataclass(frozen=True)
class SaddleSolution:
    w: np.ndarray
    y: np.ndarray
    w_hat: np.ndarray
    W_check: np.ndarray


@dataclass(frozen=True)
class NullRangeBases:
    """Orthogonal split of R^m for a matrix ``M`` with m columns.

    ``Z`` spans the nullspace of ``M``; ``Y`` is an orthonormal basis of its
    complement (the row space of ``M``).
    """

    Z: np.ndarray
    Y: np.ndarray
    rank: int


def nullspace_bases(M: np.ndarray, rank_tol: float | None = None, method: str = "qr") -> NullRangeBases:
    """Rank-revealing split of ``M`` into range and nullspace bases.

    ``method`` is ``"qr"`` (Householder QR with column pivoting on ``M^T``)
    or ``"lu"`` (Gaussian elimination with complete pivoting). The numerical
    rank counts pivots above ``rank_tol`` times the largest pivot.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    rows, m = M.shape
    if rank_tol is None:
        rank_tol = linalg.default_rank_tol(M.shape)
    if rows == 0 or m == 0:
        return NullRangeBases(np.eye(m), np.zeros((m, 0)), 0)

    if method == "qr":
        q, r, _ = linalg.qr_pivoted(M.T)
        rank = _numerical_rank(np.diag(r), rank_tol)
        return NullRangeBases(q[:, rank:], q[:, :rank], rank)

    if method == "lu":
        _, cols, _, upper = linalg.lu_full_pivot(M)
        rank = _numerical_rank(np.diag(upper), rank_tol)
        u11 = upper[:rank, :rank]
        u12 = upper[:rank, rank:]
        Z = np.zeros((m, m - rank))
        if rank and m > rank:
            Z[cols[:rank]] = -sla.solve_triangular(u11, u12, lower=False, check_finite=False)
        Z[cols[rank:]] = np.eye(m - rank)
        if rank == 0:
            return NullRangeBases(Z, np.zeros((m, 0)), 0)
        row_space = np.zeros((m, rank))
        row_space[cols] = upper[:rank].T
        q, _ = linalg.qr(row_space)
        return NullRangeBases(Z, q[:, :rank], rank)

    raise ValueError(f"unknown rank-revealing method {method!r}")


def _numerical_rank(pivots: np.ndarray, rank_tol: float) -> int:
    pivots = np.abs(pivots)
    if pivots.size == 0 or pivots[0] == 0.0:
        return 0
    return int(np.count_nonzero(pivots > rank_tol * pivots.max()))


def solve_kkt_dense(sys: SaddleSystem, rank_tol: float | None = None) -> SaddleSolution:
    """Solve the full saddle-point system with a pivoted QR factorization.

    ``w_hat`` and ``W_check`` are filled from a separate solve with ``A``; if
    ``A`` itself is singular (possible for indefinite KKT blocks) they are NaN.
    """
    K = sys.kkt_matrix()
    rhs = sys.kkt_rhs()
    n = sys.n_w
    if rank_tol is None:
        rank_tol = linalg.default_rank_tol(K.shape) * 10
    q, r, piv = linalg.qr_pivoted(K)
    rank = _numerical_rank(np.diag(r), rank_tol)
    if rank < K.shape[0]:
        raise SingularSystem(f"KKT matrix has numerical rank {rank} < {K.shape[0]}")
    z = sla.solve_triangular(r, q.T @ rhs, lower=False, check_finite=False)
    sol = np.empty_like(z)
    sol[piv] = z
    w, y = sol[:n], sol[n:]

    try:
        lu = sla.lu_factor(sys.A, check_finite=False)
        linalg.FACTORIZATIONS["lu"] += 1
        if np.abs(np.diag(lu[0])).min(initial=np.inf) <= rank_tol * np.abs(np.diag(lu[0])).max(initial=0.0):
            raise np.linalg.LinAlgError
        w_hat = sla.lu_solve(lu, sys.a, check_finite=False)
        W_check = sla.lu_solve(lu, sys.B.T, check_finite=False) if sys.n_b else np.zeros((n, 0))
    except (np.linalg.LinAlgError, ValueError):
        w_hat = np.full(n, np.nan)
        W_check = np.full((n, sys.n_b), np.nan)
    return SaddleSolution(w, y, w_hat, W_check)


def _positive_definite_factor(A: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(A)
    except NotPositiveDefinite as exc:
        raise NotPositiveDefinite(f"A is not positive definite: {exc}") from None


def solve_schur(sys: SaddleSystem, rank_tol: float = 1e-12) -> SaddleSolution:
    """Schur-complement resolution; needs ``A`` SPD and ``B`` of full row rank."""
    L = _positive_definite_factor(sys.A)
    w_hat = linalg.cho_solve(L, sys.a)
    W_check = linalg.cho_solve(L, sys.B.T) if sys.n_b else np.zeros((sys.n_w, 0))
    if sys.n_b == 0:
        return SaddleSolution(w_hat.copy(), np.zeros(0), w_hat, W_check)
    S = sys.B @ W_check
    S = 0.5 * (S + S.T)
    try:
        Ls = linalg.cholesky(S, rank_tol=rank_tol)
    except NotPositiveDefinite as exc:
        raise SingularSchur(f"Schur complement is singular: {exc}") from None
    y = -linalg.cho_solve(Ls, sys.b - sys.B @ w_hat)
    w = w_hat - W_check @ y
    return SaddleSolution(w, y, w_hat, W_check)


def solve_nullspace(
    sys: SaddleSystem,
    rank_tol: float | None = None,
    method: str = "qr",
    consistency_tol: float = 1e-8,
) -> SaddleSolution:
    """Nullspace resolution of the multiplier; tolerates rank-deficient ``B``.

    The multiplier is restricted to the range of ``S = B A^-1 B^T`` so that
    only the invertible block ``Y^T S Y`` is factorized.
    """
    L = _positive_definite_factor(sys.A)
    w_hat = linalg.cho_solve(L, sys.a)
    W_check = linalg.cho_solve(L, sys.B.T) if sys.n_b else np.zeros((sys.n_w, 0))
    if sys.n_b == 0:
        return SaddleSolution(w_hat.copy(), np.zeros(0), w_hat, W_check)
    S = sys.B @ W_check
    S = 0.5 * (S + S.T)
    bases = nullspace_bases(S, rank_tol if rank_tol is not None else 1e-10, method)
    residual = sys.b - sys.B @ w_hat
    scale = 1.0 + np.abs(sys.b).max() + np.abs(sys.B).max() * np.abs(w_hat).max(initial=0.0)
    if bases.Z.shape[1] and np.abs(bases.Z.T @ residual).max() > consistency_tol * scale:
        raise InconsistentConstraint("constraint right-hand side is outside the range of B")
    Y = bases.Y
    reduced = Y.T @ S @ Y
    Lr = linalg.cholesky(0.5 * (reduced + reduced.T))
    y = -Y @ linalg.cho_solve(Lr, Y.T @ residual)
    w = w_hat - W_check @ y
    return SaddleSolution(w, y, w_hat, W_check)
