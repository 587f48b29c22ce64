"""Outer Newton loop: direction, merit line search and regularization."""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .direction import ENDPOINT_METHODS, SearchDirection, compute_direction, refine_direction
from .errors import (
    LineSearchFailure,
    NonFiniteState,
    NotPositiveDefinite,
    RegularizationSaturated,
)
from .model import HESSIAN_MODES, Iterate, Problem, evaluate, kkt_residual, linearize

ROLLOUTS = ("feasibility-driven", "single-shooting")
STATUSES = ("Converged", "MaxIters", "LineSearchFailure", "Diverged")


@dataclass
class SolverOptions:
    max_iters: int = 100
    formulation: str = "auto"  # auto | forward | inverse-schur | inverse-nullspace
    endpoint_method: str = "schur"
    endpoint_fallback: bool = True
    nullspace_method: str = "qr"
    rollout: str = "feasibility-driven"
    hessian_mode: str = "gauss-newton"
    alphas: tuple[float, ...] = tuple(2.0**-i for i in range(11))
    merit_growth: float = 2.0
    armijo: float = 1e-4
    window: int = 5
    reg_init: float = 1e-9
    reg_min: float = 1e-9
    reg_max: float = 1e9
    reg_up: float = 10.0
    reg_down: float = 0.5
    reg_patience: int = 3
    tol_kkt: float = 1e-7
    tol_feas: float = 1e-9
    rank_tol: float | None = None
    endpoint_rank_tol: float = 1e-10
    divergence_guard: float = 1e12
    # endpoint augmentation ladder tried on negative curvature, before the
    # Gauss-Newton fallback and before raising the regularization
    augmentation_init: float = 1.0
    augmentation_max: float = 1e6
    # one extra proximal solve per direction removes the O(reg) bias of the
    # Levenberg-Marquardt term, so an LQ problem is solved in one step
    refine: bool = True

    def __post_init__(self) -> None:
        self.alphas = tuple(float(a) for a in self.alphas)
        if not self.alphas or any(not 0 < a <= 1 for a in self.alphas):
            raise ValueError("step lengths must lie in (0, 1]")
        if any(b >= a for a, b in zip(self.alphas, self.alphas[1:])):
            raise ValueError("step-length ladder must be strictly decreasing")
        for name in (
            "tol_kkt", "tol_feas", "armijo", "merit_growth", "reg_min", "reg_max", "endpoint_rank_tol",
            "augmentation_init", "augmentation_max",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.reg_min <= self.reg_init <= self.reg_max:
            raise ValueError("need reg_min <= reg_init <= reg_max")
        if self.reg_up <= 1 or not 0 < self.reg_down < 1:
            raise ValueError("need reg_up > 1 and 0 < reg_down < 1")
        if self.window < 1 or self.max_iters < 0 or self.reg_patience < 1:
            raise ValueError("window, max_iters and reg_patience must be positive")
        if self.formulation not in ("auto", "forward", "inverse-schur", "inverse-nullspace"):
            raise ValueError(f"unknown formulation {self.formulation!r}")
        if self.endpoint_method not in ENDPOINT_METHODS:
            raise ValueError(f"unknown endpoint method {self.endpoint_method!r}")
        if self.rollout not in ROLLOUTS:
            raise ValueError(f"unknown rollout {self.rollout!r}")
        if self.hessian_mode not in HESSIAN_MODES:
            raise ValueError(f"unknown Hessian mode {self.hessian_mode!r}")
        if self.nullspace_method not in ("qr", "lu"):
            raise ValueError("nullspace_method must be 'qr' or 'lu'")


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    merit: float
    merit_reference: float
    endpoint_l1: float
    dynamics_l1: float
    stagewise_l1: float
    kkt: float
    alpha: float
    reg: float
    penalty: float
    endpoint_method: str
    hessian_mode: str
    augmentation: float
    time_linearize: float
    time_direction: float
    time_line_search: float


@dataclass
class SolverStats:
    records: list[IterationRecord] = field(default_factory=list)
    status: str = "MaxIters"
    message: str = ""
    initial_cost: float = math.nan
    initial_kkt: float = math.nan
    final_kkt: float = math.nan
    total_time: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.records)


def merit(it: Iterate, nu: float) -> float:
    """``cost + nu (|fbar|_1 + |hbar|_1 + |rbar|_1)``."""
    if not nu > 0:
        raise ValueError("merit penalty must be positive")
    with np.errstate(over="ignore"):
        return float(it.cost + nu * sum(it.gap_l1()))


def update_regularization(reg: float, outcome: str, opts: SolverOptions, saturated_count: int = 0) -> tuple[float, int]:
    """Next regularization and updated saturation counter.

    ``outcome`` is ``"accepted-full"``, ``"accepted"`` or ``"rejected"``.
    Raises :class:`RegularizationSaturated` once rejections at ``reg_max``
    exceed the patience.
    """
    if outcome == "accepted-full":
        return max(reg * opts.reg_down, opts.reg_min), 0
    if outcome == "accepted":
        return reg, 0
    if outcome != "rejected":
        raise ValueError(f"unknown outcome {outcome!r}")
    if reg >= opts.reg_max:
        saturated_count += 1
        if saturated_count >= opts.reg_patience:
            raise RegularizationSaturated(f"regularization stuck at {opts.reg_max:g}")
        return opts.reg_max, saturated_count
    return min(reg * opts.reg_up, opts.reg_max), saturated_count


def rollout(problem: Problem, it: Iterate, d: SearchDirection, alpha: float, mode: str = "feasibility-driven") -> Iterate:
    """Trial iterate for step length ``alpha``.

    ``feasibility-driven`` keeps a fraction ``1 - alpha`` of every dynamics
    and stagewise gap; ``single-shooting`` integrates the closed loop from the
    initial state, closing all of them. Stagewise gaps are set by a
    minimum-norm control correction after the policy is applied.
    """
    diff = problem.state_diff
    xs = np.empty_like(it.xs)
    us = np.empty_like(it.us)
    keep = 1.0 - alpha if mode == "feasibility-driven" else 0.0
    with np.errstate(all="ignore"):
        xs[0] = problem.initial_state - keep * it.fbar[0]
        for t, stage in enumerate(problem.stages):
            us[t] = it.us[t] - alpha * d.k[t] - d.K[t] @ diff(xs[t], it.xs[t])
            if stage.nh:
                us[t] = _correct_stagewise(stage, xs[t], us[t], keep * it.hbar[t])
            xs[t + 1] = stage.dynamics(xs[t], us[t]) - keep * it.fbar[t + 1]
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(us))):
            raise NonFiniteState("rollout produced non-finite values")
        cand = evaluate(problem, xs, us, d.xi, d.gamma, d.beta)
    if not math.isfinite(cand.cost):
        raise NonFiniteState("non-finite cost along the rollout")
    return cand


def _min_norm_step(hu: np.ndarray, err: np.ndarray) -> np.ndarray:
    """Minimum-norm ``du`` with ``hu du = err``; least squares if ``hu`` is rank deficient."""
    with np.errstate(all="ignore"):
        try:
            du = hu.T @ np.linalg.solve(hu @ hu.T, err)
        except np.linalg.LinAlgError:
            du = None
    scale = 1e-10 * (1.0 + np.abs(err).max(initial=0.0))
    if du is None or not np.all(np.isfinite(du)) or np.abs(hu @ du - err).max(initial=0.0) > scale:
        du = np.linalg.lstsq(hu, err, rcond=None)[0]
    return du


def _correct_stagewise(stage, x, u, target, iters: int = 3, tol: float = 1e-13) -> np.ndarray:
    """Gauss-Newton projection of ``u`` onto ``h(x, u) = target``.

    One step suffices when ``h`` is affine in the control, as it is for
    inverse-dynamics constraints.
    """
    for _ in range(1 if stage.constraint_affine_in_control else iters):
        err = stage.constraint(x, u) - target
        if not np.all(np.isfinite(err)) or np.abs(err).max(initial=0.0) <= tol * (1.0 + np.abs(target).max(initial=0.0)):
            break
        u = u - _min_norm_step(stage.constraint_control_jacobian(x, u), err)
    return u


def line_search(
    problem: Problem,
    it: Iterate,
    d: SearchDirection,
    opts: SolverOptions,
    penalty: float,
    history: deque,
) -> tuple[Iterate, float, float, float]:
    """Nonmonotone Armijo search on the l1 merit.

    ``history`` holds the merit values of recent accepted iterates, each
    scored with the current penalty; it is restarted from the current iterate
    whenever the penalty grows. Returns ``(candidate, alpha, penalty,
    reference merit)``.
    """
    mult = max((np.abs(a).max(initial=0.0) for a in (d.xi, d.gamma, d.beta)), default=0.0)
    grown = float(max(penalty, opts.merit_growth * mult, 1e-12))
    if grown > penalty:
        # merits scored with a smaller penalty are not comparable
        history.clear()
    penalty = grown
    infeas = sum(it.gap_l1())
    slope = d.d1 - penalty * infeas
    if not slope < 0:
        raise LineSearchFailure(f"direction is not a descent direction for the merit (slope {slope:.3e})")
    if not history:
        history.append(merit(it, penalty))
    ref = max(history)
    for alpha in opts.alphas:
        try:
            cand = rollout(problem, it, d, alpha, opts.rollout)
        except NonFiniteState:
            continue
        phi = merit(cand, penalty)
        if math.isfinite(phi) and phi <= ref + opts.armijo * alpha * slope:
            return cand, alpha, penalty, ref
    raise LineSearchFailure("no step length satisfied the acceptance test")


def _resolve_formulation(problem: Problem, opts: SolverOptions) -> str:
    if opts.formulation != "auto":
        return opts.formulation
    return "forward" if problem.nh == 0 else "inverse-nullspace"


def solve(problem: Problem, xs, us, opts: SolverOptions | None = None) -> tuple[Iterate, SolverStats]:
    opts = opts or SolverOptions()
    formulation = _resolve_formulation(problem, opts)
    stats = SolverStats()
    t_start = time.perf_counter()
    it = evaluate(problem, xs, us)
    stats.initial_cost = it.cost
    reg = opts.reg_init
    penalty = 1e-12
    history: deque = deque(maxlen=opts.window)
    saturated = 0
    augment = 0.0

    def finish(status: str, message: str = "") -> tuple[Iterate, SolverStats]:
        stats.status, stats.message = status, message
        stats.total_time = time.perf_counter() - t_start
        return it, stats

    if not math.isfinite(it.cost) or not np.all(np.isfinite(it.fbar)):
        return finish("Diverged", "initial guess is not finite")

    for _ in range(opts.max_iters + 1):
        t0 = time.perf_counter()
        hessian = opts.hessian_mode
        lq = linearize(problem, it, hessian)
        kkt = kkt_residual(lq, it)
        t_lin = time.perf_counter() - t0
        if stats.iterations == 0:
            stats.initial_kkt = kkt
        stats.final_kkt = kkt
        if kkt <= opts.tol_kkt and it.gap_l1()[2] <= opts.tol_feas:
            return finish("Converged")
        if stats.iterations >= opts.max_iters:
            return finish("MaxIters")

        t_dir = t_ls = 0.0
        while True:
            t0 = time.perf_counter()
            try:
                d = compute_direction(
                    lq, reg, formulation, opts.endpoint_method, opts.rank_tol, opts.endpoint_rank_tol,
                    opts.endpoint_fallback, opts.nullspace_method, endpoint_augmentation=augment,
                )
                if opts.refine:
                    d = refine_direction(
                        lq, d, reg, formulation, endpoint_method=d.endpoint_method, rank_tol=opts.rank_tol,
                        endpoint_rank_tol=opts.endpoint_rank_tol, nullspace_method=opts.nullspace_method,
                        endpoint_augmentation=augment,
                    )
            except NotPositiveDefinite as exc:
                t_dir += time.perf_counter() - t0
                if problem.nr and augment < opts.augmentation_max:
                    augment = min(max(10.0 * augment, opts.augmentation_init), opts.augmentation_max)
                    continue
                if hessian != "gauss-newton":
                    # negative curvature from the constraint tensors: take a
                    # Gauss-Newton step before touching the regularization
                    hessian = "gauss-newton"
                    t0 = time.perf_counter()
                    lq = linearize(problem, it, hessian)
                    t_lin += time.perf_counter() - t0
                    continue
                try:
                    reg, saturated = update_regularization(reg, "rejected", opts, saturated)
                except RegularizationSaturated:
                    return finish("Diverged", f"curvature could not be restored: {exc}")
                continue
            t_dir += time.perf_counter() - t0
            t0 = time.perf_counter()
            try:
                cand, alpha, penalty, ref = line_search(problem, it, d, opts, penalty, history)
            except LineSearchFailure as exc:
                t_ls += time.perf_counter() - t0
                try:
                    reg, saturated = update_regularization(reg, "rejected", opts, saturated)
                except RegularizationSaturated:
                    return finish("LineSearchFailure", str(exc))
                continue
            t_ls += time.perf_counter() - t0
            break

        reg_used = reg
        reg, saturated = update_regularization(reg, "accepted-full" if alpha == 1.0 else "accepted", opts, saturated)
        it = cand
        phi = merit(it, penalty)
        history.append(phi)
        dyn, stg, end = it.gap_l1()
        stats.records.append(
            IterationRecord(
                iteration=stats.iterations + 1, cost=it.cost, merit=phi, merit_reference=ref,
                endpoint_l1=end, dynamics_l1=dyn, stagewise_l1=stg, kkt=kkt, alpha=alpha, reg=reg_used,
                penalty=penalty, endpoint_method=d.endpoint_method, hessian_mode=hessian, augmentation=augment,
                time_linearize=t_lin,
                time_direction=t_dir, time_line_search=t_ls,
            )
        )
        if not math.isfinite(phi) or abs(phi) > opts.divergence_guard:
            return finish("Diverged", f"merit {phi:.3e} exceeded the divergence guard")
    return finish("MaxIters")
