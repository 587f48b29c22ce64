"""Reference solutions used across the test suite.

``qp_oracle`` builds the equality-constrained QP of an LQ model directly in
the variables ``z = (dx_0..dx_N, du_0..du_{N-1})`` and solves its KKT system
with numpy. It shares no code with the package's own dense assembly, so it
also checks the block layout and sign conventions of that assembly.
"""

from dataclasses import dataclass

import numpy as np

from endpoint_ddp.model import (
    DenseLayout,
    EndpointConstraint,
    Problem,
    TerminalCost,
    assemble_dense_kkt,
    evaluate,
    linearize,
)
from endpoint_ddp.problems import LinearQuadraticStage
from endpoint_ddp.saddle import solve_kkt_dense

FORMULATIONS = ["forward", "inverse-schur", "inverse-nullspace"]


@dataclass
class QPSolution:
    dx: np.ndarray
    du: np.ndarray
    xi: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    objective: float


def _qp_blocks(lq, reg=0.0):
    N, nx, nu, nh, nr = lq.horizon, lq.nx, lq.nu, lq.nh, lq.nr
    nz = (N + 1) * nx + N * nu

    def ix(k):
        return slice(k * nx, (k + 1) * nx)

    def iu(k):
        o = (N + 1) * nx + k * nu
        return slice(o, o + nu)

    H = np.zeros((nz, nz))
    g = np.zeros(nz)
    for k in range(N):
        H[ix(k), ix(k)] += lq.Lxx[k]
        H[ix(k), iu(k)] += lq.Lxu[k]
        H[iu(k), ix(k)] += lq.Lxu[k].T
        H[iu(k), iu(k)] += lq.Luu[k] + reg * np.eye(nu)
        g[ix(k)] += lq.lx[k]
        g[iu(k)] += lq.lu[k]
    H[ix(N), ix(N)] += lq.LxxN
    g[ix(N)] += lq.lxN

    # constraints J z + c = 0, rows ordered (initial, dynamics..., stagewise..., endpoint)
    rows, consts = [], []
    J0 = np.zeros((nx, nz))
    J0[:, ix(0)] = -np.eye(nx)
    rows.append(J0)
    consts.append(lq.fbar[0])
    for k in range(N):
        Jk = np.zeros((nx, nz))
        Jk[:, ix(k)] = lq.fx[k]
        Jk[:, iu(k)] = lq.fu[k]
        Jk[:, ix(k + 1)] = -np.eye(nx)
        rows.append(Jk)
        consts.append(lq.fbar[k + 1])
    for k in range(N):
        Jh = np.zeros((nh, nz))
        Jh[:, ix(k)] = lq.hx[k]
        Jh[:, iu(k)] = lq.hu[k]
        rows.append(Jh)
        consts.append(lq.hbar[k])
    Jr = np.zeros((nr, nz))
    Jr[:, ix(N)] = lq.rx
    rows.append(Jr)
    consts.append(lq.rbar)
    return H, g, np.vstack(rows), np.concatenate(consts), ix, iu


def qp_oracle(lq, reg=0.0, least_squares=False):
    """Solve the LQ subproblem as one dense equality-constrained QP.

    ``least_squares`` tolerates redundant constraint rows; the primal part is
    then still unique, the multipliers are the minimum-norm ones.
    """
    N, nx, nh = lq.horizon, lq.nx, lq.nh
    H, g, J, c, ix, iu = _qp_blocks(lq, reg)
    nz, m = H.shape[0], J.shape[0]
    K = np.block([[H, J.T], [J, np.zeros((m, m))]])
    rhs = -np.concatenate([g, c])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0] if least_squares else np.linalg.solve(K, rhs)
    z, lam = sol[:nz], sol[nz:]
    dx = np.stack([z[ix(k)] for k in range(N + 1)])
    du = np.stack([z[iu(k)] for k in range(N)])
    xi = lam[: (N + 1) * nx].reshape(N + 1, nx)
    gamma = lam[(N + 1) * nx : (N + 1) * nx + N * nh].reshape(N, nh)
    beta = lam[(N + 1) * nx + N * nh :]
    return QPSolution(dx, du, xi, gamma, beta, float(0.5 * z @ H @ z + g @ z))


def quadratic_model_change(lq, dx, du, reg=0.0):
    """Direct substitution of a step into the quadratic cost model."""
    H, g, *_, ix, iu = _qp_blocks(lq, reg)
    z = np.concatenate([np.ravel(dx), np.ravel(du)])
    return float(0.5 * z @ H @ z + g @ z)


def dense_direction(lq, reg=0.0):
    """Package dense assembly solved by the dense saddle-point solver."""
    sys = assemble_dense_kkt(lq, reg)
    sol = solve_kkt_dense(sys)
    dx, du, xi, gamma = DenseLayout.of(lq).unpack(sol.w)
    return dx, du, xi, gamma, sol.y, sol


def pack_direction(lq, d):
    return DenseLayout.of(lq).pack(d.dx, d.du, d.xi, d.gamma)


def relative_kkt_residual(lq, d, reg=0.0):
    """Normwise backward error of ``(w, beta)`` for the dense KKT system.

    ``|K z - rhs| / (|K| |z| + |rhs|)`` in infinity norms, with ``K`` the
    full saddle-point matrix and ``z = (w, beta)``.
    """
    sys = assemble_dense_kkt(lq, reg)
    z = np.concatenate([pack_direction(lq, d), d.beta])
    K, rhs = sys.kkt_matrix(), sys.kkt_rhs()
    res = np.abs(K @ z - rhs).max()
    scale = np.abs(K).sum(axis=1).max() * np.abs(z).max() + np.abs(rhs).max()
    return float(res / scale)


def max_rel_diff(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.abs(a - b).max() / (1.0 + np.abs(b).max()))


def scalar_problem(x0=0.0, target=0.0, N=1):
    """``x+ = x + u``, stage cost ``(x^2 + u^2) / 2``, terminal ``x^2 / 2``, endpoint ``x_N = target``."""
    stage = LinearQuadraticStage(A=[[1.0]], B=[[1.0]])
    return Problem(np.array([x0]), [stage] * N, TerminalCost([[1.0]], [0.0]), EndpointConstraint([target]))


def lq_of(prob, xs=None, us=None):
    """Linear model at a given trajectory (zeros by default)."""
    xs = np.zeros((prob.horizon + 1, prob.nx)) if xs is None else xs
    us = np.zeros((prob.horizon, prob.nu)) if us is None else us
    return linearize(prob, evaluate(prob, xs, us))
