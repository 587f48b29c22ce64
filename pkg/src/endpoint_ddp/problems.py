"""Benchmark problem families: LQ instances and planar mechanisms."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import UnknownFamily
from .model import (
    EndpointConstraint,
    LQApproximation,
    Problem,
    StageModel,
    TerminalCost,
    evaluate,
    linearize,
    wrapped_difference,
)


class LinearQuadraticStage(StageModel):
    """``f = A x + B u + c``, ``h = H_x x + H_u u + d`` and a full quadratic cost."""

    constraint_affine_in_control = True

    def __init__(self, A, B, c=None, Q=None, S=None, R=None, q=None, r=None, Hx=None, Hu=None, d=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.nx, self.nu = self.B.shape
        nx, nu = self.nx, self.nu
        self.c = np.zeros(nx) if c is None else np.asarray(c, dtype=float)
        self.Q = np.eye(nx) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
        self.S = np.zeros((nx, nu)) if S is None else np.asarray(S, dtype=float).reshape(nx, nu)
        self.R = np.eye(nu) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
        self.q = np.zeros(nx) if q is None else np.asarray(q, dtype=float)
        self.r = np.zeros(nu) if r is None else np.asarray(r, dtype=float)
        self.Hx = np.zeros((0, nx)) if Hx is None else np.asarray(Hx, dtype=float).reshape(-1, nx)
        self.Hu = np.zeros((0, nu)) if Hu is None else np.asarray(Hu, dtype=float).reshape(-1, nu)
        self.nh = self.Hx.shape[0]
        self.d = np.zeros(self.nh) if d is None else np.asarray(d, dtype=float)

    def cost(self, x, u):
        return float(0.5 * x @ self.Q @ x + x @ self.S @ u + 0.5 * u @ self.R @ u + self.q @ x + self.r @ u)

    def cost_derivatives(self, x, u):
        return (
            self.Q @ x + self.S @ u + self.q,
            self.S.T @ x + self.R @ u + self.r,
            self.Q.copy(),
            self.S.copy(),
            self.R.copy(),
        )

    def dynamics(self, x, u):
        return self.A @ x + self.B @ u + self.c

    def dynamics_jacobians(self, x, u):
        return self.A.copy(), self.B.copy()

    def dynamics_hessian(self, x, u, lam):
        return np.zeros((self.nx, self.nx)), np.zeros((self.nx, self.nu)), np.zeros((self.nu, self.nu))

    def constraint(self, x, u):
        return self.Hx @ x + self.Hu @ u + self.d

    def constraint_jacobians(self, x, u):
        return self.Hx.copy(), self.Hu.copy()

    def constraint_hessian(self, x, u, gam):
        return np.zeros((self.nx, self.nx)), np.zeros((self.nx, self.nu)), np.zeros((self.nu, self.nu))


def random_lq_problem(
    seed: int,
    N: int = 5,
    nx: int = 4,
    nu: int = 2,
    nh: int = 0,
    nr: int | None = None,
    curvature: float = 0.5,
) -> Problem:
    """Time-varying random LQ problem with a strictly convex stage cost.

    ``nr`` defaults to the largest endpoint dimension that is generically
    reachable, ``min(nx, N (nu - nh))``.
    """
    rng = np.random.default_rng(seed)
    if nh >= nu:
        raise ValueError("need nh < nu so that some control freedom remains")
    if nr is None:
        nr = min(nx, N * (nu - nh))
    stages = []
    for _ in range(N):
        G = rng.standard_normal((nx + nu, nx + nu))
        H = G @ G.T / (nx + nu) + curvature * np.eye(nx + nu)
        stages.append(
            LinearQuadraticStage(
                A=np.eye(nx) + 0.3 * rng.standard_normal((nx, nx)),
                B=rng.standard_normal((nx, nu)),
                c=0.1 * rng.standard_normal(nx),
                Q=H[:nx, :nx],
                S=H[:nx, nx:],
                R=H[nx:, nx:],
                q=rng.standard_normal(nx),
                r=rng.standard_normal(nu),
                Hx=rng.standard_normal((nh, nx)),
                Hu=rng.standard_normal((nh, nu)),
                d=rng.standard_normal(nh),
            )
        )
    G = rng.standard_normal((nx, nx))
    terminal = TerminalCost(G @ G.T / nx + curvature * np.eye(nx), rng.standard_normal(nx))
    endpoint = EndpointConstraint(rng.standard_normal(nx), rng.standard_normal((nr, nx))) if nr else None
    return Problem(rng.standard_normal(nx), stages, terminal, endpoint, name=f"random-lq-{seed}")


def random_lq_approximation(seed: int, **kwargs) -> LQApproximation:
    """Linearize a random LQ problem at a random (infeasible) trajectory."""
    prob = random_lq_problem(seed, **kwargs)
    rng = np.random.default_rng(seed + 7919)
    xs = rng.standard_normal((prob.horizon + 1, prob.nx))
    us = rng.standard_normal((prob.horizon, prob.nu))
    return linearize(prob, evaluate(prob, xs, us))


# ---------------------------------------------------------------------------
# mechanical systems

INTEGRATORS = ("semi-implicit", "euler", "rk4")


class _RegularizedCost:
    """``1/2 |x - x_ref|^2_Wx + 1/2 |tau|^2 w_tau + 1/2 |a|^2 w_a``."""

    def _init_cost(self, x_ref, state_weight, control_weight, accel_weight, state_diff):
        self.x_ref = np.asarray(x_ref, dtype=float)
        self.Wx = np.diag(np.broadcast_to(np.asarray(state_weight, dtype=float), self.x_ref.shape))
        self.state_diff = state_diff
        self.Wu = np.diag(self._control_weights(control_weight, accel_weight))

    def cost(self, x, u):
        d = self.state_diff(x, self.x_ref)
        return 0.5 * float(d @ self.Wx @ d + u @ self.Wu @ u)

    def cost_derivatives(self, x, u):
        d = self.state_diff(x, self.x_ref)
        return self.Wx @ d, self.Wu @ u, self.Wx.copy(), np.zeros((self.nx, self.nu)), self.Wu.copy()


class ForwardDynamicsStage(_RegularizedCost, StageModel):
    """State ``(q, v)``, control ``tau``; accelerations from ``M^-1 (S tau - c)``."""

    def __init__(self, mech, dt, integrator, x_ref, state_weight, control_weight, state_diff):
        if integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {integrator!r}")
        self.mech, self.dt, self.integrator = mech, float(dt), integrator
        self.n_q = mech.n_q
        self.nx, self.nu, self.nh = 2 * mech.n_q, mech.n_tau, 0
        self._init_cost(x_ref, state_weight, control_weight, 0.0, state_diff)

    def _control_weights(self, control_weight, accel_weight):
        return np.full(self.nu, float(control_weight))

    def _field(self, x, u):
        n = self.n_q
        return np.concatenate([x[n:], self.mech.forward(x[:n], x[n:], u)])

    def _field_jacobians(self, x, u):
        n = self.n_q
        aq, av, at = self.mech.forward_jacobians(x[:n], x[n:], u)
        Fx = np.zeros((2 * n, 2 * n))
        Fx[:n, n:] = np.eye(n)
        Fx[n:, :n], Fx[n:, n:] = aq, av
        return Fx, np.vstack([np.zeros((n, self.nu)), at])

    def dynamics(self, x, u):
        n, dt = self.n_q, self.dt
        q, v = x[:n], x[n:]
        if self.integrator == "rk4":
            k1 = self._field(x, u)
            k2 = self._field(x + 0.5 * dt * k1, u)
            k3 = self._field(x + 0.5 * dt * k2, u)
            k4 = self._field(x + dt * k3, u)
            return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        a = self.mech.forward(q, v, u)
        if self.integrator == "euler":
            return np.concatenate([q + dt * v, v + dt * a])
        v1 = v + dt * a
        return np.concatenate([q + dt * v1, v1])

    def dynamics_jacobians(self, x, u):
        n, dt = self.n_q, self.dt
        if self.integrator == "rk4":
            return self._rk4_jacobians(x, u)
        aq, av, at = self.mech.forward_jacobians(x[:n], x[n:], u)
        eye = np.eye(n)
        if self.integrator == "euler":
            fx = np.block([[eye, dt * eye], [dt * aq, eye + dt * av]])
            fu = np.vstack([np.zeros((n, self.nu)), dt * at])
        else:
            fx = np.block([[eye + dt * dt * aq, dt * eye + dt * dt * av], [dt * aq, eye + dt * av]])
            fu = np.vstack([dt * dt * at, dt * at])
        return fx, fu

    def _rk4_jacobians(self, x, u):
        dt, nx = self.dt, self.nx
        ks, dk_dx, dk_du = [], [], []
        for c in (0.0, 0.5, 0.5, 1.0):
            if ks:
                xi = x + c * dt * ks[-1]
                dxi_dx = np.eye(nx) + c * dt * dk_dx[-1]
                dxi_du = c * dt * dk_du[-1]
            else:
                xi, dxi_dx, dxi_du = x, np.eye(nx), np.zeros((nx, self.nu))
            Fx, Fu = self._field_jacobians(xi, u)
            ks.append(self._field(xi, u))
            dk_dx.append(Fx @ dxi_dx)
            dk_du.append(Fx @ dxi_du + Fu)
        w = (1.0, 2.0, 2.0, 1.0)
        fx = np.eye(nx) + dt / 6.0 * sum(wi * d for wi, d in zip(w, dk_dx))
        fu = dt / 6.0 * sum(wi * d for wi, d in zip(w, dk_du))
        return fx, fu

    def dynamics_hessian(self, x, u, lam):
        n, dt = self.n_q, self.dt
        if self.integrator == "rk4":
            raise NotImplementedError("exact Hessians are not available for the RK4 integrator")
        weight = dt * lam[n:] if self.integrator == "euler" else dt * dt * lam[:n] + dt * lam[n:]
        H = self.mech.forward_hessian(x[:n], x[n:], u, weight)
        m = 2 * n
        return H[:m, :m], H[:m, m:], H[m:, m:]


class InverseDynamicsStage(_RegularizedCost, StageModel):
    """State ``(q, v)``, control ``(a, tau)``; ``h = M a + c - S tau`` enforces the physics."""

    constraint_affine_in_control = True

    def __init__(self, mech, dt, integrator, x_ref, state_weight, control_weight, accel_weight, state_diff):
        if integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {integrator!r}")
        self.mech, self.dt, self.integrator = mech, float(dt), integrator
        n = self.n_q = mech.n_q
        self.nx, self.nu, self.nh = 2 * n, n + mech.n_tau, n
        self._init_cost(x_ref, state_weight, control_weight, accel_weight, state_diff)
        eye, dt = np.eye(n), self.dt
        # the double integrator is linear, so the discretization is constant
        if integrator == "euler":
            self._fx = np.block([[eye, dt * eye], [np.zeros((n, n)), eye]])
            fa = np.vstack([np.zeros((n, n)), dt * eye])
        else:
            self._fx = np.block([[eye, dt * eye], [np.zeros((n, n)), eye]])
            fa = np.vstack([(dt * dt if integrator == "semi-implicit" else 0.5 * dt * dt) * eye, dt * eye])
        self._fu = np.hstack([fa, np.zeros((2 * n, mech.n_tau))])

    def _control_weights(self, control_weight, accel_weight):
        return np.concatenate([np.full(self.n_q, float(accel_weight)), np.full(self.mech.n_tau, float(control_weight))])

    def dynamics(self, x, u):
        return self._fx @ x + self._fu @ u

    def dynamics_jacobians(self, x, u):
        return self._fx.copy(), self._fu.copy()

    def dynamics_hessian(self, x, u, lam):
        return np.zeros((self.nx, self.nx)), np.zeros((self.nx, self.nu)), np.zeros((self.nu, self.nu))

    def constraint(self, x, u):
        n = self.n_q
        return self.mech.inverse(x[:n], x[n:], u[:n]) - self.mech.S @ u[n:]

    def constraint_jacobians(self, x, u):
        n = self.n_q
        Jq, Jv, M = self.mech.inverse_jacobians(x[:n], x[n:], u[:n])
        return np.hstack([Jq, Jv]), np.hstack([M, -self.mech.S])

    def constraint_control_jacobian(self, x, u):
        return np.hstack([self.mech.mass(x[: self.n_q]), -self.mech.S])

    def constraint_hessian(self, x, u, gam):
        n, m = self.n_q, 2 * self.n_q
        H = self.mech.inverse_hessian(x[:n], x[n:], u[:n], gam)
        xu = np.zeros((m, self.nu))
        uu = np.zeros((self.nu, self.nu))
        xu[:, :n] = H[:m, m:]
        uu[:n, :n] = H[m:, m:]
        return H[:m, :m], xu, uu


class LQRInverseStage(StageModel):
    """LQR stage with the dynamics moved into a stagewise constraint.

    Controls are ``(u, s)``; the integrator is ``x+ = x + s`` and
    ``h = A x + B u + c - x - s`` ties ``s`` to the true dynamics.
    """

    constraint_affine_in_control = True

    def __init__(self, base: LinearQuadraticStage):
        self.base = base
        nx, nu = base.nx, base.nu
        self.nx, self.nu, self.nh = nx, nu + nx, nx
        self._fu = np.hstack([np.zeros((nx, nu)), np.eye(nx)])
        self._hx = base.A - np.eye(nx)
        self._hu = np.hstack([base.B, -np.eye(nx)])

    def cost(self, x, u):
        return self.base.cost(x, u[: self.base.nu])

    def cost_derivatives(self, x, u):
        nu, nx = self.nu, self.nx
        lx, lu, Lxx, Lxu, Luu = self.base.cost_derivatives(x, u[: self.base.nu])
        m = self.base.nu
        lu_full, Lxu_full, Luu_full = np.zeros(nu), np.zeros((nx, nu)), np.zeros((nu, nu))
        lu_full[:m], Lxu_full[:, :m], Luu_full[:m, :m] = lu, Lxu, Luu
        return lx, lu_full, Lxx, Lxu_full, Luu_full

    def dynamics(self, x, u):
        return x + u[self.base.nu :]

    def dynamics_jacobians(self, x, u):
        return np.eye(self.nx), self._fu.copy()

    def dynamics_hessian(self, x, u, lam):
        return np.zeros((self.nx, self.nx)), np.zeros((self.nx, self.nu)), np.zeros((self.nu, self.nu))

    def constraint(self, x, u):
        return self._hx @ x + self._hu @ u + self.base.c

    def constraint_jacobians(self, x, u):
        return self._hx.copy(), self._hu.copy()

    def constraint_hessian(self, x, u, gam):
        return self.dynamics_hessian(x, u, gam)


class DuplicatedConstraintStage(StageModel):
    """Stacks the stagewise constraint of ``inner`` ``times`` times (rank deficient on purpose)."""

    def __init__(self, inner: StageModel, times: int):
        if times < 2:
            raise ValueError("duplication needs times >= 2")
        self.inner, self.times = inner, times
        self.nx, self.nu, self.nh = inner.nx, inner.nu, inner.nh * times
        self.constraint_affine_in_control = inner.constraint_affine_in_control

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def cost(self, x, u):
        return self.inner.cost(x, u)

    def cost_derivatives(self, x, u):
        return self.inner.cost_derivatives(x, u)

    def dynamics(self, x, u):
        return self.inner.dynamics(x, u)

    def dynamics_jacobians(self, x, u):
        return self.inner.dynamics_jacobians(x, u)

    def dynamics_hessian(self, x, u, lam):
        return self.inner.dynamics_hessian(x, u, lam)

    def constraint(self, x, u):
        return np.tile(self.inner.constraint(x, u), self.times)

    def constraint_jacobians(self, x, u):
        hx, hu = self.inner.constraint_jacobians(x, u)
        return np.vstack([hx] * self.times), np.vstack([hu] * self.times)

    def constraint_control_jacobian(self, x, u):
        return np.vstack([self.inner.constraint_control_jacobian(x, u)] * self.times)

    def constraint_hessian(self, x, u, gam):
        return self.inner.constraint_hessian(x, u, gam.reshape(self.times, -1).sum(axis=0))


# ---------------------------------------------------------------------------
# specification and construction

FAMILIES = ("lqr", "point-mass", "cartpole", "dpend")

_DEFAULTS = {
    "lqr": dict(horizon=20, dt=0.1, params={}),
    "point-mass": dict(
        horizon=50, dt=0.02, params={"mass": 1.0, "gravity": 9.81},
        initial_state=[0.0, 0.0, 0.0, 0.0], target=[1.0, 0.5, 0.0, 0.0],
    ),
    "cartpole": dict(
        horizon=100, dt=0.02, params={"cart_mass": 1.0, "pole_mass": 0.2, "length": 0.5, "gravity": 9.81},
        initial_state=[0.0, np.pi, 0.0, 0.0], target=[0.0, 0.0, 0.0, 0.0],
    ),
    "dpend": dict(
        horizon=200, dt=0.01,
        params={"mass1": 1.0, "mass2": 1.0, "length1": 0.5, "length2": 0.5, "gravity": 9.81},
        initial_state=[np.pi, 0.0, 0.0, 0.0], target=[0.0, 0.0, 0.0, 0.0],
    ),
}

_ANGLES = {"point-mass": (), "cartpole": (1,), "dpend": (0, 1)}


@dataclass
class ProblemSpec:
    family: str
    formulation: str = "forward"
    horizon: int | None = None
    dt: float | None = None
    integrator: str = "semi-implicit"
    params: dict = field(default_factory=dict)
    initial_state: list | None = None
    target: list | None = None
    state_weight: float = 1e-2
    control_weight: float = 1e-3
    accel_weight: float = 0.0
    terminal_weight: float = 0.0
    fully_actuated: bool = False
    duplicate_endpoint: int = 1
    duplicate_stagewise: int = 1
    seed: int = 0
    nx: int = 4
    nu: int = 2

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise UnknownFamily(f"unknown problem family {self.family!r}; known: {', '.join(FAMILIES)}")
        if self.formulation not in ("forward", "inverse"):
            raise ValueError(f"formulation must be 'forward' or 'inverse', got {self.formulation!r}")
        defaults = _DEFAULTS[self.family]
        if self.horizon is None:
            self.horizon = defaults["horizon"]
        if self.dt is None:
            self.dt = defaults["dt"]
        self.params = {**defaults["params"], **self.params}
        if self.initial_state is None and "initial_state" in defaults:
            self.initial_state = list(defaults["initial_state"])
        if self.target is None and "target" in defaults:
            self.target = list(defaults["target"])
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        bad = [k for k, v in self.params.items() if not v > 0]
        if bad:
            raise ValueError(f"physical parameters must be positive: {bad}")
        if self.duplicate_endpoint < 1 or self.duplicate_stagewise < 1:
            raise ValueError("duplication counts must be >= 1")
        if self.duplicate_stagewise > 1 and self.formulation != "inverse":
            raise ValueError("stagewise duplication needs the inverse formulation")


def build(spec: ProblemSpec) -> Problem:
    """Construct the problem described by ``spec``.

    Running costs are small regularization terms towards the target; the
    terminal requirement is the endpoint constraint.
    """
    if spec.family == "lqr":
        prob = _build_lqr(spec)
    else:
        prob = _build_mechanical(spec)
    if spec.duplicate_stagewise > 1:
        prob.stages = [DuplicatedConstraintStage(s, spec.duplicate_stagewise) for s in prob.stages]
    if spec.duplicate_endpoint > 1:
        prob = duplicate_endpoint(prob, spec.duplicate_endpoint)
    return prob


def _build_lqr(spec: ProblemSpec) -> Problem:
    rng = np.random.default_rng(spec.seed)
    nx, nu, dt = spec.nx, spec.nu, spec.dt
    A = np.eye(nx) + dt * rng.standard_normal((nx, nx))
    B = dt * rng.standard_normal((nx, nu))
    x0 = np.asarray(spec.initial_state, dtype=float) if spec.initial_state is not None else rng.standard_normal(nx)
    target = np.asarray(spec.target, dtype=float) if spec.target is not None else np.zeros(nx)
    base = LinearQuadraticStage(
        A, B, Q=spec.state_weight * np.eye(nx), R=spec.control_weight * np.eye(nu), q=-spec.state_weight * target
    )
    stage = base if spec.formulation == "forward" else LQRInverseStage(base)
    terminal = TerminalCost(spec.terminal_weight * np.eye(nx), target)
    endpoint = EndpointConstraint(target)
    return Problem(x0, [stage] * spec.horizon, terminal, endpoint, name=f"lqr-{spec.formulation}")


def _build_mechanical(spec: ProblemSpec) -> Problem:
    from .mechanics import Mechanism

    family = "dpend-full" if spec.family == "dpend" and spec.fully_actuated else spec.family
    mech = Mechanism(family, spec.params)
    diff = wrapped_difference(_ANGLES[spec.family])
    target = np.asarray(spec.target, dtype=float)
    if spec.formulation == "forward":
        stage = ForwardDynamicsStage(
            mech, spec.dt, spec.integrator, target, spec.state_weight, spec.control_weight, diff
        )
    else:
        stage = InverseDynamicsStage(
            mech, spec.dt, spec.integrator, target, spec.state_weight, spec.control_weight, spec.accel_weight, diff
        )
    terminal = TerminalCost(spec.terminal_weight * np.eye(target.size), target, diff)
    endpoint = EndpointConstraint(target, state_diff=diff)
    return Problem(
        np.asarray(spec.initial_state, dtype=float),
        [stage] * spec.horizon,
        terminal,
        endpoint,
        state_diff=diff,
        name=f"{spec.family}-{spec.formulation}",
    )


def duplicate_endpoint(problem: Problem, times: int) -> Problem:
    """Copy of ``problem`` with every endpoint row repeated ``times`` times."""
    if times < 2:
        raise ValueError("duplicate_endpoint needs times >= 2")
    if problem.endpoint is None:
        raise ValueError("problem has no endpoint constraint")
    return replace(problem, endpoint=problem.endpoint.stacked(times), name=f"{problem.name}-dup{times}")


def initial_guess(problem: Problem) -> tuple[np.ndarray, np.ndarray]:
    """Constant state at the initial condition and zero controls."""
    xs = np.tile(problem.initial_state, (problem.horizon + 1, 1))
    return xs, np.zeros((problem.horizon, problem.nu))


def perturbed_guess(problem: Problem, magnitude: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    xs, us = initial_guess(problem)
    if magnitude == 0:
        return xs, us
    rng = np.random.default_rng(seed)
    return xs + magnitude * rng.standard_normal(xs.shape), us + magnitude * rng.standard_normal(us.shape)
