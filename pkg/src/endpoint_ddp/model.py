r"""Nonlinear optimal-control problems with stagewise and endpoint equalities.

The problem solved is

.. math::

    \min \; \ell_N(x_N) + \sum_k \ell_k(x_k, u_k) \quad \text{s.t.}\quad
    \tilde x_0 \ominus x_0 = 0,\;
    f_k(x_k, u_k) \ominus x_{k+1} = 0,\;
    h_k(x_k, u_k) = 0,\;
    r(x_N) = 0.

Multiplier conventions (kept consistent with the dense assembly below): the
Lagrangian is ``cost + xi_0^T (x0~ - x0) + sum xi_{k+1}^T (f_k - x_{k+1})
+ sum gamma_k^T h_k + beta^T r``. Multipliers are stored as full values, not
increments.
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import CallbackFailure, DimensionMismatch
from .saddle import SaddleSystem

StateDiff = Callable[[np.ndarray, np.ndarray], np.ndarray]


def vector_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a - b


def wrapped_difference(angle_indices: Sequence[int]) -> StateDiff:
    """``a - b`` with the listed components wrapped into (-pi, pi]."""
    idx = tuple(int(i) for i in angle_indices)
    two_pi = 2.0 * math.pi

    def diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d = np.asarray(a, dtype=float) - b
        if d.ndim == 1:
            for i in idx:
                d[i] = math.pi - (math.pi - d[i]) % two_pi
        else:
            cols = list(idx)
            d[..., cols] = np.pi - np.mod(np.pi - d[..., cols], two_pi)
        return d

    return diff


class StageModel:
    """Callbacks for one stage ``(l_k, f_k, h_k)``.

    Subclasses override what they need. Stagewise constraints default to
    none. The Hessian contractions ``lam . f_xx`` and ``gam . h_xx`` are only
    used by the exact-Hessian mode and raise when not supplied.
    """

    nx: int
    nu: int
    nh: int = 0
    # lets rollouts restore h(x, u) = target with a single linear correction
    constraint_affine_in_control: bool = False

    def cost(self, x: np.ndarray, u: np.ndarray) -> float:
        raise NotImplementedError

    def cost_derivatives(self, x, u):
        """Return ``(l_x, l_u, l_xx, l_xu, l_uu)``."""
        raise NotImplementedError

    def dynamics(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dynamics_jacobians(self, x, u):
        raise NotImplementedError

    def dynamics_hessian(self, x, u, lam):
        """Return ``(lam.f_xx, lam.f_xu, lam.f_uu)``."""
        raise NotImplementedError(f"{type(self).__name__} has no dynamics Hessian callback")

    def constraint(self, x, u) -> np.ndarray:
        return np.zeros(0)

    def constraint_jacobians(self, x, u):
        return np.zeros((0, self.nx)), np.zeros((0, self.nu))

    def constraint_control_jacobian(self, x, u):
        return self.constraint_jacobians(x, u)[1]

    def constraint_hessian(self, x, u, gam):
        if self.nh == 0:
            return np.zeros((self.nx, self.nx)), np.zeros((self.nx, self.nu)), np.zeros((self.nu, self.nu))
        raise NotImplementedError(f"{type(self).__name__} has no constraint Hessian callback")


class TerminalCost:
    """``1/2 (x - ref)^T W (x - ref)`` with the difference taken by ``state_diff``."""

    def __init__(self, weight: np.ndarray, reference: np.ndarray, state_diff: StateDiff = vector_difference):
        self.weight = np.atleast_2d(np.asarray(weight, dtype=float))
        self.reference = np.asarray(reference, dtype=float)
        self.state_diff = state_diff

    def cost(self, x: np.ndarray) -> float:
        d = self.state_diff(x, self.reference)
        return 0.5 * float(d @ self.weight @ d)

    def cost_derivatives(self, x: np.ndarray):
        return self.weight @ self.state_diff(x, self.reference), self.weight.copy()


class EndpointConstraint:
    """``r(x_N) = rows @ (x_N - target) = 0``, optionally stacked.

    The difference uses the problem's ``state_diff`` so wrapped angles stay
    chart independent. Being linear in the state difference, its Hessian
    contraction is zero.
    """

    def __init__(self, target, rows=None, state_diff: StateDiff = vector_difference):
        self.target = np.asarray(target, dtype=float)
        nx = self.target.size
        self.rows = np.eye(nx) if rows is None else np.atleast_2d(np.asarray(rows, dtype=float)).reshape(-1, nx)
        self.state_diff = state_diff

    @property
    def nr(self) -> int:
        return self.rows.shape[0]

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.rows @ self.state_diff(x, self.target)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.rows.copy()

    def hessian(self, x: np.ndarray, beta: np.ndarray) -> np.ndarray:
        return np.zeros((x.size, x.size))

    def stacked(self, times: int) -> EndpointConstraint:
        return EndpointConstraint(self.target, np.vstack([self.rows] * times), self.state_diff)


@dataclass
class Problem:
    initial_state: np.ndarray
    stages: list[StageModel]
    terminal: TerminalCost
    endpoint: EndpointConstraint | None = None
    state_diff: StateDiff = vector_difference
    name: str = "problem"

    def __post_init__(self) -> None:
        self.initial_state = np.asarray(self.initial_state, dtype=float)
        if not self.stages:
            raise DimensionMismatch("a problem needs at least one stage")
        s0 = self.stages[0]
        for k, s in enumerate(self.stages):
            if (s.nx, s.nu, s.nh) != (s0.nx, s0.nu, s0.nh):
                raise DimensionMismatch(f"stage {k} dimensions differ from stage 0")
        if self.initial_state.shape != (s0.nx,):
            raise DimensionMismatch("initial state has the wrong size")

    @property
    def horizon(self) -> int:
        return len(self.stages)

    @property
    def nx(self) -> int:
        return self.stages[0].nx

    @property
    def nu(self) -> int:
        return self.stages[0].nu

    @property
    def nh(self) -> int:
        return self.stages[0].nh

    @property
    def nr(self) -> int:
        return 0 if self.endpoint is None else self.endpoint.nr


@dataclass
class Iterate:
    xs: np.ndarray
    us: np.ndarray
    fbar: np.ndarray
    hbar: np.ndarray
    rbar: np.ndarray
    xi: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    cost: float

    @property
    def horizon(self) -> int:
        return self.us.shape[0]

    def gap_l1(self) -> tuple[float, float, float]:
        return (
            float(np.abs(self.fbar).sum()),
            float(np.abs(self.hbar).sum()),
            float(np.abs(self.rbar).sum()),
        )

    def copy(self) -> Iterate:
        return replace(self, **{f: np.array(getattr(self, f)) for f in ("xs", "us", "fbar", "hbar", "rbar", "xi", "gamma", "beta")})


def evaluate(
    problem: Problem,
    xs: np.ndarray,
    us: np.ndarray,
    xi: np.ndarray | None = None,
    gamma: np.ndarray | None = None,
    beta: np.ndarray | None = None,
) -> Iterate:
    """Evaluate cost and all gaps along a trajectory; multipliers default to zero."""
    N, nx, nu, nh, nr = problem.horizon, problem.nx, problem.nu, problem.nh, problem.nr
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    if xs.shape != (N + 1, nx) or us.shape != (N, nu):
        raise DimensionMismatch(f"expected xs {(N + 1, nx)} and us {(N, nu)}, got {xs.shape} and {us.shape}")
    diff = problem.state_diff
    fbar = np.empty((N + 1, nx))
    hbar = np.empty((N, nh))
    fbar[0] = diff(problem.initial_state, xs[0])
    cost = 0.0
    for k, stage in enumerate(problem.stages):
        x, u = xs[k], us[k]
        cost += stage.cost(x, u)
        fbar[k + 1] = diff(stage.dynamics(x, u), xs[k + 1])
        if nh:
            hbar[k] = stage.constraint(x, u)
    cost += problem.terminal.cost(xs[N])
    rbar = problem.endpoint.residual(xs[N]) if nr else np.zeros(0)
    return Iterate(
        xs=xs,
        us=us,
        fbar=fbar,
        hbar=hbar,
        rbar=rbar,
        xi=np.zeros((N + 1, nx)) if xi is None else np.array(xi, dtype=float),
        gamma=np.zeros((N, nh)) if gamma is None else np.array(gamma, dtype=float),
        beta=np.zeros(nr) if beta is None else np.array(beta, dtype=float),
        cost=float(cost),
    )


@dataclass
class LQApproximation:
    """Stacked local model of the problem around an iterate.

    Per-stage arrays carry a leading stage axis of length N; ``fbar`` has
    N + 1 entries (``fbar[0]`` is the initial-state gap).
    """

    Lxx: np.ndarray
    Lxu: np.ndarray
    Luu: np.ndarray
    lx: np.ndarray
    lu: np.ndarray
    fx: np.ndarray
    fu: np.ndarray
    hx: np.ndarray
    hu: np.ndarray
    fbar: np.ndarray
    hbar: np.ndarray
    lxN: np.ndarray
    LxxN: np.ndarray
    rx: np.ndarray
    rbar: np.ndarray

    @property
    def horizon(self) -> int:
        return self.lu.shape[0]

    @property
    def nx(self) -> int:
        return self.lxN.size

    @property
    def nu(self) -> int:
        return self.lu.shape[1]

    @property
    def nh(self) -> int:
        return self.hbar.shape[1]

    @property
    def nr(self) -> int:
        return self.rbar.size

    def with_gaps(self, fbar=None, hbar=None, rbar=None) -> LQApproximation:
        return replace(
            self,
            fbar=self.fbar if fbar is None else np.asarray(fbar, dtype=float),
            hbar=self.hbar if hbar is None else np.asarray(hbar, dtype=float),
            rbar=self.rbar if rbar is None else np.asarray(rbar, dtype=float),
        )


HESSIAN_MODES = ("gauss-newton", "exact-callback")


def linearize(problem: Problem, it: Iterate, hessian_mode: str = "gauss-newton") -> LQApproximation:
    """Derivatives of the problem at ``it``.

    In ``gauss-newton`` mode the Lagrangian Hessian is the cost Hessian. In
    ``exact-callback`` mode the stored multipliers ``xi_{k+1}``, ``gamma_k``
    and ``beta`` contract the second derivatives of dynamics, stagewise
    constraints and endpoint.
    """
    if hessian_mode not in HESSIAN_MODES:
        raise ValueError(f"unknown Hessian mode {hessian_mode!r}")
    exact = hessian_mode == "exact-callback"
    N, nx, nu, nh, nr = problem.horizon, problem.nx, problem.nu, problem.nh, problem.nr
    Lxx = np.empty((N, nx, nx))
    Lxu = np.empty((N, nx, nu))
    Luu = np.empty((N, nu, nu))
    lx = np.empty((N, nx))
    lu = np.empty((N, nu))
    fx = np.empty((N, nx, nx))
    fu = np.empty((N, nx, nu))
    hx = np.empty((N, nh, nx))
    hu = np.empty((N, nh, nu))
    for k, stage in enumerate(problem.stages):
        x, u = it.xs[k], it.us[k]
        try:
            lx[k], lu[k], Lxx[k], Lxu[k], Luu[k] = stage.cost_derivatives(x, u)
            fx[k], fu[k] = stage.dynamics_jacobians(x, u)
            if nh:
                hx[k], hu[k] = stage.constraint_jacobians(x, u)
            if exact:
                for lam, hess in ((it.xi[k + 1], stage.dynamics_hessian), (it.gamma[k], stage.constraint_hessian)):
                    if lam.size and np.any(lam):
                        cxx, cxu, cuu = hess(x, u, lam)
                        Lxx[k] += cxx
                        Lxu[k] += cxu
                        Luu[k] += cuu
        except NotImplementedError as exc:
            raise CallbackFailure(str(exc), stage=k) from exc
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            raise CallbackFailure(f"{type(exc).__name__}: {exc}", stage=k) from exc
    Lxx = 0.5 * (Lxx + Lxx.transpose(0, 2, 1))
    Luu = 0.5 * (Luu + Luu.transpose(0, 2, 1))
    lxN, LxxN = problem.terminal.cost_derivatives(it.xs[N])
    LxxN = np.array(LxxN, dtype=float)
    if nr:
        rx = problem.endpoint.jacobian(it.xs[N])
        if exact and np.any(it.beta):
            LxxN = LxxN + problem.endpoint.hessian(it.xs[N], it.beta)
    else:
        rx = np.zeros((0, nx))
    return LQApproximation(
        Lxx=Lxx,
        Lxu=Lxu,
        Luu=Luu,
        lx=lx,
        lu=lu,
        fx=fx,
        fu=fu,
        hx=hx,
        hu=hu,
        fbar=it.fbar.copy(),
        hbar=it.hbar.copy(),
        lxN=np.asarray(lxN, dtype=float),
        LxxN=0.5 * (LxxN + LxxN.T),
        rx=rx,
        rbar=it.rbar.copy(),
    )


@dataclass(frozen=True)
class DenseLayout:
    """Offsets of each block of the dense KKT vector.

    Order: ``xi_0, dx_0, du_0, gamma_0, xi_1, dx_1, ..., xi_N, dx_N`` and the
    endpoint multiplier lives outside ``w`` (it is ``y``).
    """

    N: int
    nx: int
    nu: int
    nh: int
    stage_size: int = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_size", 2 * self.nx + self.nu + self.nh)

    @property
    def size(self) -> int:
        return self.N * self.stage_size + 2 * self.nx

    def xi(self, k: int) -> slice:
        o = k * self.stage_size
        return slice(o, o + self.nx)

    def x(self, k: int) -> slice:
        o = k * self.stage_size + self.nx
        return slice(o, o + self.nx)

    def u(self, k: int) -> slice:
        o = k * self.stage_size + 2 * self.nx
        return slice(o, o + self.nu)

    def gamma(self, k: int) -> slice:
        o = k * self.stage_size + 2 * self.nx + self.nu
        return slice(o, o + self.nh)

    @classmethod
    def of(cls, lq: LQApproximation) -> DenseLayout:
        return cls(lq.horizon, lq.nx, lq.nu, lq.nh)

    def pack(self, dxs, dus, xis, gammas) -> np.ndarray:
        """Stack trajectories (possibly with trailing column axes) into ``w``."""
        dxs = np.asarray(dxs)
        tail = dxs.shape[2:]
        w = np.zeros((self.size,) + tail)
        for k in range(self.N + 1):
            w[self.xi(k)] = xis[k]
            w[self.x(k)] = dxs[k]
            if k < self.N:
                w[self.u(k)] = dus[k]
                if self.nh:
                    w[self.gamma(k)] = gammas[k]
        return w

    def unpack(self, w: np.ndarray):
        dxs = np.stack([w[self.x(k)] for k in range(self.N + 1)])
        dus = np.stack([w[self.u(k)] for k in range(self.N)])
        xis = np.stack([w[self.xi(k)] for k in range(self.N + 1)])
        gammas = np.stack([w[self.gamma(k)] for k in range(self.N)])
        return dxs, dus, xis, gammas


def assemble_dense_kkt(lq: LQApproximation, reg: float = 0.0) -> SaddleSystem:
    """Dense ``(A, a, B, b)`` of the Newton system in :class:`DenseLayout` order.

    ``A`` is the KKT matrix of the problem without endpoint constraint,
    ``a`` the negated gradient/gap stack, ``B = [0 ... 0 r_x]`` and
    ``b = -rbar``, so that ``A w + B^T beta = a`` and ``B w = b``. ``reg``
    is added to the control Hessian blocks, mirroring the Riccati sweeps.
    """
    lay = DenseLayout.of(lq)
    N, nx, nu = lay.N, lay.nx, lay.nu
    A = np.zeros((lay.size, lay.size))
    a = np.zeros(lay.size)
    eye = np.eye(nx)
    for k in range(N):
        xi, x, u, g, xi1 = lay.xi(k), lay.x(k), lay.u(k), lay.gamma(k), lay.xi(k + 1)
        # -dx_k appears in the row of xi_k (initial or dynamics constraint)
        A[xi, x] = -eye
        A[x, xi] = -eye
        A[x, x] = lq.Lxx[k]
        A[x, u] = lq.Lxu[k]
        A[u, x] = lq.Lxu[k].T
        A[u, u] = lq.Luu[k] + reg * np.eye(nu)
        if lay.nh:
            A[g, x] = lq.hx[k]
            A[g, u] = lq.hu[k]
            A[x, g] = lq.hx[k].T
            A[u, g] = lq.hu[k].T
            a[g] = -lq.hbar[k]
        A[xi1, x] = lq.fx[k]
        A[xi1, u] = lq.fu[k]
        A[x, xi1] = lq.fx[k].T
        A[u, xi1] = lq.fu[k].T
        a[xi] = -lq.fbar[k]
        a[x] = -lq.lx[k]
        a[u] = -lq.lu[k]
    xiN, xN = lay.xi(N), lay.x(N)
    A[xiN, xN] = -eye
    A[xN, xiN] = -eye
    A[xN, xN] = lq.LxxN
    a[xiN] = -lq.fbar[N]
    a[xN] = -lq.lxN
    B = np.zeros((lq.nr, lay.size))
    B[:, xN] = lq.rx
    return SaddleSystem(A, a, B, -lq.rbar)


def kkt_residual(lq: LQApproximation, it: Iterate) -> float:
    """Max-norm of the first-order optimality conditions at ``it``.

    Stationarity uses the multipliers stored on the iterate; feasibility uses
    its gaps. The linear model must have been built at ``it``.
    """
    N = lq.horizon
    xi, gam = it.xi, it.gamma
    rx_ = np.einsum("kji,kj->ki", lq.fx, xi[1:]) + lq.lx - xi[:N]
    ru = np.einsum("kji,kj->ki", lq.fu, xi[1:]) + lq.lu
    if lq.nh:
        rx_ += np.einsum("kji,kj->ki", lq.hx, gam)
        ru += np.einsum("kji,kj->ki", lq.hu, gam)
    rN = lq.lxN - xi[N] + (lq.rx.T @ it.beta if lq.nr else 0.0)
    parts = [rx_, ru, rN, it.fbar, it.hbar, it.rbar]
    return float(max(np.abs(p).max(initial=0.0) for p in parts))


def _central_jacobian(fun, z: np.ndarray, step: float) -> np.ndarray:
    f0 = np.atleast_1d(fun(z))
    J = np.empty((f0.size, z.size))
    h = step * (1.0 + np.abs(z).max(initial=0.0))
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        J[:, i] = (np.atleast_1d(fun(z + e)) - np.atleast_1d(fun(z - e))) / (2.0 * h)
    return J


def _relative_error(analytic, numeric) -> float:
    analytic, numeric = np.atleast_2d(analytic), np.atleast_2d(numeric)
    if analytic.size == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / (1.0 + np.abs(numeric).max()))


def check_derivatives(problem: Problem, xs: np.ndarray, us: np.ndarray, step: float = 1e-6) -> dict[str, float]:
    """Worst relative mismatch between analytic and central-difference derivatives.

    Covers cost gradients, dynamics and constraint Jacobians at every stage,
    and the terminal cost and endpoint Jacobian.
    """
    worst: dict[str, float] = {}

    def note(key, analytic, numeric):
        worst[key] = max(worst.get(key, 0.0), _relative_error(analytic, numeric))

    for k, s in enumerate(problem.stages):
        x, u = np.asarray(xs[k], dtype=float), np.asarray(us[k], dtype=float)
        lx, lu, *_ = s.cost_derivatives(x, u)
        note("l_x", lx, _central_jacobian(lambda z: s.cost(z, u), x, step))
        note("l_u", lu, _central_jacobian(lambda z: s.cost(x, z), u, step))
        fx, fu = s.dynamics_jacobians(x, u)
        note("f_x", fx, _central_jacobian(lambda z: s.dynamics(z, u), x, step))
        note("f_u", fu, _central_jacobian(lambda z: s.dynamics(x, z), u, step))
        if s.nh:
            hx, hu = s.constraint_jacobians(x, u)
            note("h_x", hx, _central_jacobian(lambda z: s.constraint(z, u), x, step))
            note("h_u", hu, _central_jacobian(lambda z: s.constraint(x, z), u, step))
    xN = np.asarray(xs[-1], dtype=float)
    lxN, _ = problem.terminal.cost_derivatives(xN)
    note("l_xN", lxN, _central_jacobian(problem.terminal.cost, xN, step))
    if problem.nr:
        note("r_x", problem.endpoint.jacobian(xN), _central_jacobian(problem.endpoint.residual, xN, step))
    return worst
