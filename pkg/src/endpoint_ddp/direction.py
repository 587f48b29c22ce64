"""Endpoint multiplier recovery and the combined Newton direction.

The full direction is ``w = w_hat - W_check beta``. Because the endpoint
constraint only touches ``dx_N``, the operator ``B W_check`` reduces to the
small ``nr x nr`` matrix ``r_x dX_N``.

Expected improvement. With ``m(d)`` the local quadratic model (cost plus the
regularization term), ``m(d_hat - W_check beta) = m(d_hat) + 1/2 beta^T S
beta`` where ``S = r_x dX_N``. The check value model sums to ``-1/2 S``, so
the total model change is ``hat - beta^T (check) beta``. The first-order part
``g^T d`` is tracked separately to scale the model along the step length:
``change(alpha) = alpha d1 + 1/2 alpha^2 d2``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import linalg
from .errors import InconsistentEndpoint, NotPositiveDefinite, SingularEndpointOperator
from .model import LQApproximation
from .riccati_check import CheckDirection, CheckValueModel, backward_pass_check, rollout_check
from .riccati_hat import HatDirection, HatPolicy, HatValueModel, backward_pass_hat, rollout_hat
from .saddle import nullspace_bases

ENDPOINT_METHODS = ("schur", "null-qr", "null-lu")


@dataclass
class SearchDirection:
    dx: np.ndarray
    du: np.ndarray
    xi: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    k: np.ndarray  # combined feedforward, du = -k - K dx
    K: np.ndarray
    d1: float
    d2: float
    endpoint_method: str = "schur"

    def expected_change(self, alpha: float) -> float:
        return alpha * self.d1 + 0.5 * alpha * alpha * self.d2


def _endpoint_rhs(rx, rbar, dx_hat_N):
    return np.asarray(rbar, dtype=float) + rx @ dx_hat_N


def endpoint_multiplier_schur(rx, rbar, dx_hat_N, dX_N, rank_tol: float = 1e-12) -> np.ndarray:
    """``beta = (r_x dX_N)^-1 (rbar + r_x dx_hat_N)`` by Cholesky."""
    rhs = _endpoint_rhs(rx, rbar, dx_hat_N)
    if rhs.size == 0:
        return np.zeros(0)
    S = rx @ dX_N
    try:
        L = linalg.cholesky(0.5 * (S + S.T), rank_tol=rank_tol)
    except NotPositiveDefinite as exc:
        raise SingularEndpointOperator(f"endpoint operator is singular: {exc}") from None
    return linalg.cho_solve(L, rhs)


def endpoint_multiplier_nullspace(
    rx,
    rbar,
    dx_hat_N,
    dX_N,
    rank_tol: float = 1e-10,
    method: str = "qr",
    consistency_tol: float = 1e-8,
) -> np.ndarray:
    """Range-restricted multiplier; tolerates duplicated endpoint rows."""
    rhs = _endpoint_rhs(rx, rbar, dx_hat_N)
    if rhs.size == 0:
        return np.zeros(0)
    S = rx @ dX_N
    S = 0.5 * (S + S.T)
    bases = nullspace_bases(S, rank_tol, method)
    Z, Y = bases.Z, bases.Y
    scale = 1.0 + np.abs(rbar).max(initial=0.0) + np.abs(rx @ dx_hat_N).max(initial=0.0)
    if Z.shape[1] and np.abs(Z.T @ rhs).max() > consistency_tol * scale:
        raise InconsistentEndpoint("endpoint residual lies outside the range of the endpoint operator")
    if bases.rank == 0:
        return np.zeros(rhs.size)
    L = linalg.cholesky(Y.T @ S @ Y)
    return Y @ linalg.cho_solve(L, Y.T @ rhs)


def total_expected_improvement(hat: HatValueModel, chk: CheckValueModel, beta, alpha: float) -> float:
    """Predicted decrease of the local model for a step of length ``alpha``.

    Positive values predict a decrease. ``beta = 0`` gives the hat-only model.
    """
    d1, d2 = model_terms(hat, chk, beta)
    return -(alpha * d1 + 0.5 * alpha * alpha * d2)


def model_terms(hat: HatValueModel, chk: CheckValueModel, beta) -> tuple[float, float]:
    """First- and second-order coefficients of the model change along the step."""
    beta = np.asarray(beta, dtype=float)
    full = hat.model_change()
    d1 = hat.grad_const
    if beta.size:
        full -= float(beta @ chk.model_change() @ beta)
        d1 -= float(chk.grad_const @ beta)
    return float(d1), float(2.0 * (full - d1))


def combine(hat: HatDirection, chk: CheckDirection, beta) -> tuple[np.ndarray, ...]:
    """``d = d_hat - d_check beta`` for states, controls and multipliers."""
    beta = np.asarray(beta, dtype=float)
    if beta.size == 0:
        return hat.dx, hat.du, hat.xi, hat.gamma
    return (
        hat.dx - chk.dX @ beta,
        hat.du - chk.dU @ beta,
        hat.xi - chk.Xi @ beta,
        hat.gamma - chk.Gamma @ beta,
    )


@dataclass
class DirectionParts:
    """Intermediate products kept for inspection and testing."""

    hat_policy: HatPolicy
    hat_value: HatValueModel
    hat: HatDirection
    check_k: np.ndarray
    check_value: CheckValueModel
    check: CheckDirection


def compute_direction(
    lq: LQApproximation,
    reg: float = 0.0,
    formulation: str = "forward",
    endpoint_method: str = "schur",
    rank_tol: float | None = None,
    endpoint_rank_tol: float = 1e-10,
    fallback: bool = True,
    nullspace_method: str = "qr",
    return_parts: bool = False,
    endpoint_augmentation: float = 0.0,
):
    """Both Riccati sweeps, the multiplier, and the combined direction.

    With ``fallback`` a singular endpoint operator under ``schur`` switches to
    the QR nullspace multiplier for this call; the method actually used is
    recorded on the result.

    ``endpoint_augmentation`` adds ``rho/2 |r_x dx_N + rbar|^2`` to the
    terminal model. The term vanishes wherever the linearized endpoint holds,
    so the direction and multipliers are unchanged, but it gives the
    endpoint-independent sweep curvature along endpoint-violating directions
    (an exact Hessian can be indefinite there). The reported model terms
    exclude it.
    """
    if endpoint_method not in ENDPOINT_METHODS:
        raise ValueError(f"unknown endpoint method {endpoint_method!r}")
    rho = float(endpoint_augmentation)
    if rho < 0:
        raise ValueError("endpoint_augmentation must be >= 0")
    if rho > 0 and lq.nr:
        lq = replace(lq, LxxN=lq.LxxN + rho * lq.rx.T @ lq.rx, lxN=lq.lxN + rho * lq.rx.T @ lq.rbar)
    pol, val = backward_pass_hat(lq, reg, formulation, rank_tol, nullspace_method)
    hat = rollout_hat(lq, pol, val)
    cpol, cval = backward_pass_check(lq, pol, val.grad)
    chk = rollout_check(lq, pol, cpol, cval, val.Vxx)
    used = endpoint_method
    dX_N = chk.dX[-1]
    if endpoint_method == "schur":
        try:
            beta = endpoint_multiplier_schur(lq.rx, lq.rbar, hat.dx[-1], dX_N, endpoint_rank_tol)
        except SingularEndpointOperator:
            if not fallback:
                raise
            used = "null-qr"
            beta = endpoint_multiplier_nullspace(lq.rx, lq.rbar, hat.dx[-1], dX_N, endpoint_rank_tol, "qr")
    else:
        beta = endpoint_multiplier_nullspace(
            lq.rx, lq.rbar, hat.dx[-1], dX_N, endpoint_rank_tol, endpoint_method.removeprefix("null-")
        )
    dx, du, xi, gamma = combine(hat, chk, beta)
    k = pol.k - cpol.k @ beta if beta.size else pol.k
    d1, d2 = model_terms(val, cval, beta)
    if rho > 0 and lq.nr:
        lin = lq.rx @ dx[-1]
        d1 -= rho * float(lq.rbar @ lin)
        d2 -= rho * float(lin @ lin)
    out = SearchDirection(dx, du, xi, gamma, beta, k, pol.K, d1, d2, used)
    if return_parts:
        return out, DirectionParts(pol, val, hat, cpol.k, cval, chk)
    return out


def model_coefficients(lq: LQApproximation, dx, du, reg: float = 0.0) -> tuple[float, float]:
    """``(g^T d, d^T H d)`` of the regularized quadratic model along ``(dx, du)``."""
    d1 = float(np.einsum("ki,ki->", lq.lx, dx[:-1]) + np.einsum("ki,ki->", lq.lu, du) + lq.lxN @ dx[-1])
    d2 = float(
        np.einsum("ki,kij,kj->", dx[:-1], lq.Lxx, dx[:-1])
        + 2.0 * np.einsum("ki,kij,kj->", dx[:-1], lq.Lxu, du)
        + np.einsum("ki,kij,kj->", du, lq.Luu, du)
        + reg * np.einsum("ki,ki->", du, du)
        + dx[-1] @ lq.LxxN @ dx[-1]
    )
    return d1, d2


def refine_direction(lq: LQApproximation, d: SearchDirection, reg: float, formulation: str = "forward", **kwargs):
    """One more proximal step on the same quadratic model.

    The sweeps solve the model plus ``reg/2 |du|^2``, which leaves a
    stationarity bias of ``reg du``. The correction solves the same
    regularized system with that bias as control gradient and all gaps zero,
    so the combined step has an O(reg^2) bias and the model still decreases.
    Extra keyword arguments go to :func:`compute_direction`.
    """
    if reg <= 0.0:
        return d
    bias = replace(
        lq,
        lx=np.zeros_like(lq.lx),
        lu=-reg * d.du,
        lxN=np.zeros_like(lq.lxN),
        fbar=np.zeros_like(lq.fbar),
        hbar=np.zeros_like(lq.hbar),
        rbar=np.zeros_like(lq.rbar),
    )
    e = compute_direction(bias, reg, formulation, **kwargs)
    dx, du = d.dx + e.dx, d.du + e.du
    d1, d2 = model_coefficients(lq, dx, du, reg)
    return SearchDirection(
        dx, du, d.xi + e.xi, d.gamma + e.gamma, d.beta + e.beta, d.k + e.k, d.K, d1, d2, d.endpoint_method
    )

