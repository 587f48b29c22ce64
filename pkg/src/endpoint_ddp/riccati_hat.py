"""Endpoint-independent Riccati sweep and its linear rollout.

The sweep computes ``w_hat = A^-1 a`` for the optimal-control KKT matrix
without the endpoint rows. Each stage condenses to the local system

    [Q_uu  h_u^T] [-du]   [Q_u + Q_ux dx]
    [h_u    0   ] [ g ] = [hbar + h_x dx]

solved by one of three policies. The factorizations produced here are kept
on the policy so that the endpoint-dependent sweep can reuse them.

Regularization is added to ``Q_uu`` only, and every value-function formula
uses the regularized block, so the sweep solves exactly the KKT system of the
proximally regularized problem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import NotPositiveDefinite, SingularConstraintBlock
from .linalg import RangeFactor
from .model import LQApproximation
from .saddle import nullspace_bases

FORMULATIONS = ("forward", "inverse-schur", "inverse-nullspace")


@dataclass
class StageFactor:
    """Factorizations retained from one stage of the hat sweep."""

    kind: str
    Quu: np.ndarray
    Qxu: np.ndarray | None = None
    chol_uu: np.ndarray | None = None
    # inverse-schur
    chol_schur: np.ndarray | None = None
    gain_h: np.ndarray | None = None  # Q_uu^-1 h_u^T
    hu: np.ndarray | None = None
    # inverse-nullspace
    Z: np.ndarray | None = None
    Y: np.ndarray | None = None
    chol_zz: np.ndarray | None = None
    range_factor: RangeFactor | None = None


@dataclass
class HatPolicy:
    k: np.ndarray
    K: np.ndarray
    gamma_ff: np.ndarray
    gamma_fb: np.ndarray
    factors: list[StageFactor] | None
    formulation: str
    reg: float


@dataclass
class HatValueModel:
    """Quadratic value model of the hat policy.

    ``Vx = Vx1 + Vx2``. ``grad`` and ``grad_const`` carry the linear
    evaluation ``g^T d`` of the cost gradient along the closed loop, used to
    split the expected improvement into its first- and second-order parts.
    """

    Vx: np.ndarray
    Vxx: np.ndarray
    Vx1: np.ndarray
    Vx2: np.ndarray
    dV1: np.ndarray
    dV2: np.ndarray
    gap_term: float
    grad: np.ndarray
    grad_const: float

    def model_change(self) -> float:
        """Change of the quadratic model along the full hat direction."""
        return float(np.sum(self.dV2) + 0.5 * np.sum(self.dV1) + self.gap_term)


@dataclass
class HatDirection:
    dx: np.ndarray
    du: np.ndarray
    xi: np.ndarray
    gamma: np.ndarray


def policy_forward(Qu, Quu, Qux, *, stage: int | None = None):
    """Unconstrained stage: ``k = Quu^-1 Qu``, ``K = Quu^-1 Qux``."""
    try:
        L = linalg.cholesky(Quu)
    except NotPositiveDefinite as exc:
        raise NotPositiveDefinite(f"Q_uu not positive definite: {exc}", stage=stage) from None
    return linalg.cho_solve(L, Qu), linalg.cho_solve(L, Qux), L


def policy_inverse_schur(Qu, Quu, Qux, hx, hu, hbar, *, rank_tol: float = 1e-12, stage: int | None = None):
    """Constrained stage through the Schur complement ``h_u Q_uu^-1 h_u^T``.

    Returns ``(k, K, gamma_ff, gamma_fb, factor)`` with the stagewise
    multiplier ``gamma = gamma_ff + gamma_fb dx``.
    """
    k0, K0, L = policy_forward(Qu, Quu, Qux, stage=stage)
    nh = hu.shape[0]
    if nh == 0:
        factor = StageFactor("forward", Quu, chol_uu=L)
        return k0, K0, np.zeros(0), np.zeros((0, Qux.shape[1])), factor
    gain_h = linalg.cho_solve(L, hu.T)
    schur = hu @ gain_h
    try:
        Ls = linalg.cholesky(0.5 * (schur + schur.T), rank_tol=rank_tol)
    except NotPositiveDefinite:
        raise SingularConstraintBlock("h_u Q_uu^-1 h_u^T is singular", stage=stage) from None
    gamma_ff = linalg.cho_solve(Ls, hbar - hu @ k0)
    gamma_fb = linalg.cho_solve(Ls, hx - hu @ K0)
    k = k0 + gain_h @ gamma_ff
    K = K0 + gain_h @ gamma_fb
    factor = StageFactor("inverse-schur", Quu, chol_uu=L, chol_schur=Ls, gain_h=gain_h, hu=hu)
    return k, K, gamma_ff, gamma_fb, factor


def policy_inverse_nullspace(
    Qu,
    Quu,
    Qux,
    hx,
    hu,
    hbar,
    *,
    rank_tol: float = 1e-10,
    method: str = "qr",
    consistency_tol: float = 1e-8,
    stage: int | None = None,
):
    """Constrained stage through null/range bases of ``h_u``.

    Works with rank-deficient ``h_u`` as long as ``hbar`` and ``h_x`` stay
    in its range. Returns the same tuple as :func:`policy_inverse_schur`.
    """
    nx = Qux.shape[1]
    bases = nullspace_bases(hu, rank_tol, method) if hu.shape[0] else nullspace_bases(np.zeros((0, Quu.shape[0])))
    Z, Y = bases.Z, bases.Y
    huY = hu @ Y
    rf = RangeFactor.factor(huY)
    rhs = np.column_stack([hbar, hx]) if hu.shape[0] else np.zeros((0, 1 + nx))
    v = rf.solve(rhs)
    scale = 1.0 + np.abs(rhs).max(initial=0.0)
    if np.abs(huY @ v - rhs).max(initial=0.0) > consistency_tol * scale:
        raise SingularConstraintBlock("constraint gap lies outside the range of h_u", stage=stage)
    particular = Y @ v  # (nu, 1 + nx): minimum-norm solution of h_u du = -(hbar + h_x dx)
    Qzz = Z.T @ Quu @ Z
    try:
        Lzz = linalg.cholesky(0.5 * (Qzz + Qzz.T))
    except NotPositiveDefinite as exc:
        raise NotPositiveDefinite(f"reduced Hessian Q_zz not positive definite: {exc}", stage=stage) from None
    reduced = Z.T @ (np.column_stack([Qu, Qux]) - Quu @ particular)
    sol = particular + Z @ linalg.cho_solve(Lzz, reduced)
    k, K = sol[:, 0], sol[:, 1:]
    # multiplier from the range part of the stationarity row
    g = rf.solve_transpose(Y.T @ (Quu @ sol - np.column_stack([Qu, Qux])))
    factor = StageFactor("inverse-nullspace", Quu, Z=Z, Y=Y, chol_zz=Lzz, range_factor=rf)
    return k, K, g[:, 0], g[:, 1:], factor


def backward_pass_hat(
    lq: LQApproximation,
    reg: float = 0.0,
    formulation: str = "forward",
    rank_tol: float | None = None,
    nullspace_method: str = "qr",
) -> tuple[HatPolicy, HatValueModel]:
    if formulation not in FORMULATIONS:
        raise ValueError(f"unknown formulation {formulation!r}")
    if formulation == "forward" and lq.nh:
        raise ValueError("forward formulation cannot carry stagewise constraints")
    N, nx, nu, nh = lq.horizon, lq.nx, lq.nu, lq.nh
    simplified = formulation == "forward"
    k_all = np.empty((N, nu))
    K_all = np.empty((N, nu, nx))
    gff = np.zeros((N, nh))
    gfb = np.zeros((N, nh, nx))
    factors: list[StageFactor | None] = [None] * N
    Vx = np.empty((N + 1, nx))
    Vxx = np.empty((N + 1, nx, nx))
    Vx1 = np.zeros((N + 1, nx))
    Vx2 = np.empty((N + 1, nx))
    dV1 = np.empty(N)
    dV2 = np.empty(N)
    grad = np.empty((N + 1, nx))
    Vx[N] = Vx2[N] = grad[N] = lq.lxN
    Vxx[N] = lq.LxxN
    grad_const = 0.0
    gap_term = 0.0
    eye = np.eye(nu)

    for t in range(N - 1, -1, -1):
        fx, fu, fbar = lq.fx[t], lq.fu[t], lq.fbar[t + 1]
        Vn, Vnn = Vx[t + 1], Vxx[t + 1]
        Vplus = Vn + Vnn @ fbar
        gap_term += Vn @ fbar + 0.5 * fbar @ Vnn @ fbar
        VF = Vnn @ fx
        VU = Vnn @ fu
        Qx = lq.lx[t] + fx.T @ Vplus
        Qu = lq.lu[t] + fu.T @ Vplus
        Qxx = lq.Lxx[t] + fx.T @ VF
        Qxu = lq.Lxu[t] + fx.T @ VU
        Quu = lq.Luu[t] + fu.T @ VU + reg * eye
        Quu = 0.5 * (Quu + Quu.T)
        Qux = Qxu.T

        if formulation == "forward":
            k, K, L = policy_forward(Qu, Quu, Qux, stage=t)
            factors[t] = StageFactor("forward", Quu, chol_uu=L)
        elif formulation == "inverse-schur":
            k, K, gff[t], gfb[t], factors[t] = policy_inverse_schur(
                Qu, Quu, Qux, lq.hx[t], lq.hu[t], lq.hbar[t], rank_tol=rank_tol or 1e-12, stage=t
            )
        else:
            k, K, gff[t], gfb[t], factors[t] = policy_inverse_nullspace(
                Qu, Quu, Qux, lq.hx[t], lq.hu[t], lq.hbar[t],
                rank_tol=rank_tol or 1e-10, method=nullspace_method, stage=t,
            )
        factors[t].Qxu = Qxu
        k_all[t], K_all[t] = k, K

        if simplified:
            dV1[t] = k @ Qu
            dV2[t] = -k @ Qu
            Vx2[t] = Qx - K.T @ Qu
            V2 = Qxx - Qxu @ K
        else:
            Quu_k = Quu @ k
            dV1[t] = k @ Quu_k
            dV2[t] = -k @ Qu
            Vx1[t] = K.T @ Quu_k - Qxu @ k
            Vx2[t] = Qx - K.T @ Qu
            QxuK = Qxu @ K
            V2 = Qxx - QxuK - QxuK.T + K.T @ Quu @ K
        Vx[t] = Vx1[t] + Vx2[t]
        Vxx[t] = 0.5 * (V2 + V2.T)

        closed = fx - fu @ K
        grad[t] = lq.lx[t] - K.T @ lq.lu[t] + closed.T @ grad[t + 1]
        grad_const += -lq.lu[t] @ k + grad[t + 1] @ (fbar - fu @ k)

    f0 = lq.fbar[0]
    gap_term += Vx[0] @ f0 + 0.5 * f0 @ Vxx[0] @ f0
    grad_const += grad[0] @ f0
    policy = HatPolicy(k_all, K_all, gff, gfb, factors, formulation, reg)
    value = HatValueModel(Vx, Vxx, Vx1, Vx2, dV1, dV2, float(gap_term), grad, float(grad_const))
    return policy, value


def rollout_hat(lq: LQApproximation, pol: HatPolicy, value: HatValueModel) -> HatDirection:
    """Linear rollout of the hat policy starting from the initial-state gap.

    The dynamics multipliers follow from the value model, ``xi_k = Vx_k +
    Vxx_k dx_k``; the stagewise ones from the policy's multiplier gains.
    """
    N, nx, nu, nh = lq.horizon, lq.nx, lq.nu, lq.nh
    dx = np.empty((N + 1, nx))
    du = np.empty((N, nu))
    gamma = np.empty((N, nh))
    dx[0] = lq.fbar[0]
    for t in range(N):
        du[t] = -pol.k[t] - pol.K[t] @ dx[t]
        gamma[t] = pol.gamma_ff[t] + pol.gamma_fb[t] @ dx[t]
        dx[t + 1] = lq.fx[t] @ dx[t] + lq.fu[t] @ du[t] + lq.fbar[t + 1]
    xi = value.Vx + np.einsum("kij,kj->ki", value.Vxx, dx)
    return HatDirection(dx, du, xi, gamma)
