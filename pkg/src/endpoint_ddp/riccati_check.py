"""Endpoint-dependent Riccati sweep.

Computes the primal and multiplier blocks of ``W_check = A^-1 B^T`` column by
column, seeded with ``-r_x^T`` at the final stage. All gaps and gradients are
zero for this sweep, and it only performs triangular solves against the
factors retained by the hat sweep; it never factorizes anything itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import StaleFactorization
from .model import LQApproximation
from .riccati_hat import HatPolicy, StageFactor


@dataclass
class CheckPolicy:
    k: np.ndarray  # (N, nu, nr); feedback is shared with the hat policy
    gamma_ff: np.ndarray  # (N, nh, nr)


@dataclass
class CheckValueModel:
    Vx: np.ndarray  # (N + 1, nx, nr)
    Vx1: np.ndarray
    Vx2: np.ndarray
    dV1: np.ndarray  # (N, nr, nr)
    dV2: np.ndarray
    grad_const: np.ndarray  # (nr,): cost gradient along the check columns

    def model_change(self) -> np.ndarray:
        """Symmetric (nr x nr) change of the quadratic model per unit multiplier."""
        M = self.dV2.sum(axis=0) + 0.5 * self.dV1.sum(axis=0)
        return 0.5 * (M + M.T)


@dataclass
class CheckDirection:
    dX: np.ndarray  # (N + 1, nx, nr)
    dU: np.ndarray  # (N, nu, nr)
    Xi: np.ndarray  # (N + 1, nx, nr)
    Gamma: np.ndarray  # (N, nh, nr)


def _feedforward(f: StageFactor, Qut: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if f.kind == "forward":
        return linalg.cho_solve(f.chol_uu, Qut), np.zeros((0, Qut.shape[1]))
    if f.kind == "inverse-schur":
        k0 = linalg.cho_solve(f.chol_uu, Qut)
        g = linalg.cho_solve(f.chol_schur, -f.hu @ k0)
        return k0 + f.gain_h @ g, g
    k = f.Z @ linalg.cho_solve(f.chol_zz, f.Z.T @ Qut)
    g = f.range_factor.solve_transpose(f.Y.T @ (f.Quu @ k - Qut))
    return k, g


def backward_pass_check(
    lq: LQApproximation, hat: HatPolicy, hat_grad: np.ndarray | None = None
) -> tuple[CheckPolicy, CheckValueModel]:
    """Endpoint-dependent sweep reusing the hat factors.

    ``hat_grad`` is the closed-loop gradient evaluation of the hat value
    model; when given, the cost gradient along each check column is
    accumulated for the expected-improvement split.
    """
    N, nx, nu, nh, nr = lq.horizon, lq.nx, lq.nu, lq.nh, lq.nr
    if hat.factors is None or len(hat.factors) != N or any(f is None for f in hat.factors):
        raise StaleFactorization("hat policy carries no retained factorizations")
    kc = np.zeros((N, nu, nr))
    gc = np.zeros((N, nh, nr))
    Vx = np.zeros((N + 1, nx, nr))
    Vx1 = np.zeros((N + 1, nx, nr))
    Vx2 = np.zeros((N + 1, nx, nr))
    dV1 = np.zeros((N, nr, nr))
    dV2 = np.zeros((N, nr, nr))
    grad_const = np.zeros(nr)
    if nr == 0:
        return CheckPolicy(kc, gc), CheckValueModel(Vx, Vx1, Vx2, dV1, dV2, grad_const)
    Vx[N] = Vx2[N] = -lq.rx.T
    simplified = hat.formulation == "forward"
    for t in range(N - 1, -1, -1):
        f = hat.factors[t]
        fu = lq.fu[t]
        Qxt = lq.fx[t].T @ Vx[t + 1]
        Qut = fu.T @ Vx[t + 1]
        k, g = _feedforward(f, Qut)
        kc[t] = k
        if nh:
            gc[t] = g
        K = hat.K[t]
        if simplified:
            dV1[t] = k.T @ Qut
            Vx2[t] = Qxt - K.T @ Qut
        else:
            Quu_k = f.Quu @ k
            dV1[t] = k.T @ Quu_k
            Vx1[t] = K.T @ Quu_k - f.Qxu @ k
            Vx2[t] = Qxt - K.T @ Qut
        dV2[t] = -k.T @ Qut
        Vx[t] = Vx1[t] + Vx2[t]
        if hat_grad is not None:
            grad_const -= lq.lu[t] @ k + hat_grad[t + 1] @ (fu @ k)
    return CheckPolicy(kc, gc), CheckValueModel(Vx, Vx1, Vx2, dV1, dV2, grad_const)


def rollout_check(
    lq: LQApproximation, hat: HatPolicy, pol: CheckPolicy, value: CheckValueModel, Vxx: np.ndarray
) -> CheckDirection:
    """Matrix rollout from ``dX_0 = 0`` with no gap terms.

    ``Vxx`` is the hat value Hessian, which both sweeps share.
    """
    N, nx, nu, nh, nr = lq.horizon, lq.nx, lq.nu, lq.nh, lq.nr
    dX = np.zeros((N + 1, nx, nr))
    dU = np.zeros((N, nu, nr))
    Gamma = np.zeros((N, nh, nr))
    for t in range(N):
        dU[t] = -pol.k[t] - hat.K[t] @ dX[t]
        if nh:
            Gamma[t] = pol.gamma_ff[t] + hat.gamma_fb[t] @ dX[t]
        dX[t + 1] = lq.fx[t] @ dX[t] + lq.fu[t] @ dU[t]
    Xi = value.Vx + np.einsum("kij,kjr->kir", Vxx, dX)
    return CheckDirection(dX, dU, Xi, Gamma)
