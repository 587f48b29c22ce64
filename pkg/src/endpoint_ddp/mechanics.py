"""Planar point-mass mechanisms with symbolically generated derivatives.

A mechanism is described by the positions of its point masses as functions of
the generalized coordinates. Lagrange's equations give

    M(q) a + c(q, v) = S tau

and sympy produces numeric callbacks for the inverse-dynamics residual
``M a + c``, the forward acceleration ``M^-1 (S tau - c)``, their Jacobians
and weighted Hessians. Physical parameters stay symbolic, so each family is
compiled once per process.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
import sympy as sp


@dataclass(frozen=True)
class MechanismDef:
    name: str
    n_q: int
    parameters: tuple[str, ...]
    # (q symbols, parameter symbols) -> list of (mass symbol, (x, y) position)
    masses: Callable
    actuation: tuple[tuple[float, ...], ...]  # S, n_q x n_tau


def _point_mass(q, p):
    m, g = p
    return [(m, (q[0], q[1]))]


def _cartpole(q, p):
    mc, mp, length, g = p
    return [(mc, (q[0], sp.Integer(0))), (mp, (q[0] + length * sp.sin(q[1]), length * sp.cos(q[1])))]


def _double_pendulum(q, p):
    m1, m2, l1, l2, g = p
    x1, y1 = l1 * sp.sin(q[0]), l1 * sp.cos(q[0])
    return [(m1, (x1, y1)), (m2, (x1 + l2 * sp.sin(q[0] + q[1]), y1 + l2 * sp.cos(q[0] + q[1])))]


MECHANISMS = {
    "point-mass": MechanismDef("point-mass", 2, ("mass", "gravity"), _point_mass, ((1.0, 0.0), (0.0, 1.0))),
    "cartpole": MechanismDef(
        "cartpole", 2, ("cart_mass", "pole_mass", "length", "gravity"), _cartpole, ((1.0,), (0.0,))
    ),
    # angles from the upward vertical; the second is relative to the first link
    "dpend": MechanismDef(
        "dpend", 2, ("mass1", "mass2", "length1", "length2", "gravity"), _double_pendulum, ((1.0,), (0.0,))
    ),
    "dpend-full": MechanismDef(
        "dpend-full", 2, ("mass1", "mass2", "length1", "length2", "gravity"), _double_pendulum, ((1.0, 0.0), (0.0, 1.0))
    ),
}


def _lagrangian_terms(defn: MechanismDef):
    n = defn.n_q
    q = sp.Matrix(sp.symbols(f"q0:{n}"))
    v = sp.Matrix(sp.symbols(f"v0:{n}"))
    p = sp.symbols(" ".join(defn.parameters))
    p = p if isinstance(p, tuple) else (p,)
    g = p[-1]
    T = sp.Integer(0)
    V = sp.Integer(0)
    for m, (x, y) in defn.masses(list(q), p):
        pos = sp.Matrix([x, y])
        vel = pos.jacobian(q) * v
        T += m * (vel.T * vel)[0] / 2
        V += m * g * y
    M = sp.simplify(sp.hessian(T, v))
    dTdq = sp.Matrix([sp.diff(T, qi) for qi in q])
    dVdq = sp.Matrix([sp.diff(V, qi) for qi in q])
    c = (M * v).jacobian(q) * v - dTdq + dVdq
    c = sp.simplify(c)
    return q, v, p, M, c, T, V


class Mechanism:
    """Numeric callbacks of one mechanism at fixed physical parameters."""

    def __init__(self, family: str, params: dict[str, float]):
        if family not in MECHANISMS:
            raise KeyError(family)
        self.defn = MECHANISMS[family]
        missing = set(self.defn.parameters) - set(params)
        if missing:
            raise ValueError(f"missing parameters for {family}: {sorted(missing)}")
        self.params = tuple(float(params[k]) for k in self.defn.parameters)
        self.n_q = self.defn.n_q
        self.S = np.array(self.defn.actuation, dtype=float)
        self.n_tau = self.S.shape[1]
        self._fn = _compiled(family)

    # inverse dynamics: M a + c
    def mass(self, q):
        return np.asarray(self._fn["M"](q, self.params), dtype=float)

    def bias(self, q, v):
        return np.asarray(self._fn["c"](q, v, self.params), dtype=float).reshape(-1)

    def inverse(self, q, v, a):
        return np.asarray(self._fn["id"](q, v, a, self.params), dtype=float).reshape(-1)

    def inverse_jacobians(self, q, v, a):
        """``(d/dq, d/dv, d/da)`` of ``M a + c``."""
        Jq, Jv = self._fn["id_jac"](q, v, a, self.params)
        return np.asarray(Jq, dtype=float), np.asarray(Jv, dtype=float), self.mass(q)

    def inverse_hessian(self, q, v, a, w):
        """Hessian of ``w^T (M a + c)`` with respect to ``(q, v, a)``."""
        return np.asarray(self._fn["id_hess"](q, v, a, w, self.params), dtype=float)

    # forward dynamics: M^-1 (S tau - c)
    def forward(self, q, v, tau):
        return np.linalg.solve(self.mass(q), self.S @ tau - self.bias(q, v))

    def forward_jacobians(self, q, v, tau):
        """``(a_q, a_v, a_tau)`` through the implicit-function theorem."""
        a = self.forward(q, v, tau)
        Jq, Jv, M = self.inverse_jacobians(q, v, a)
        Minv = np.linalg.inv(M)
        return -Minv @ Jq, -Minv @ Jv, Minv @ self.S

    def forward_hessian(self, q, v, tau, w):
        """Hessian of ``w^T a(q, v, tau)`` with respect to ``(q, v, tau)``."""
        return np.asarray(self._fn["fd_hess"](q, v, tau, w, self.params), dtype=float)

    def energy(self, q, v):
        return float(self._fn["E"](q, v, self.params))


@lru_cache(maxsize=None)
def _compiled(family: str) -> dict[str, Callable]:
    defn = MECHANISMS[family]
    q, v, p, M, c, T, V = _lagrangian_terms(defn)
    n = defn.n_q
    S = sp.Matrix(defn.actuation)
    a = sp.Matrix(sp.symbols(f"a0:{n}"))
    w = sp.Matrix(sp.symbols(f"w0:{n}"))
    tau = sp.Matrix(sp.symbols(f"tau0:{S.shape[1]}"))
    rid = M * a + c
    z_id = list(q) + list(v) + list(a)
    acc = M.LUsolve(S * tau - c)
    z_fd = list(q) + list(v) + list(tau)
    qs, vs, as_, ws, ts = list(q), list(v), list(a), list(w), list(tau)
    lam = lambda args, expr: sp.lambdify(args, expr, modules="numpy", cse=True)  # noqa: E731

    fns = {
        "M": lam([qs, p], M),
        "c": lam([qs, vs, p], c),
        "id": lam([qs, vs, as_, p], rid),
        "id_jac": lam([qs, vs, as_, p], [rid.jacobian(q), rid.jacobian(v)]),
        "E": lam([qs, vs, p], T + V),
    }
    # Hessians are compiled on first use; they dominate the compile time.
    fns["id_hess"] = _LazyHessian(lambda: lam([qs, vs, as_, ws, p], sp.hessian((w.T * rid)[0], z_id)))
    fns["fd_hess"] = _LazyHessian(lambda: lam([qs, vs, ts, ws, p], sp.hessian((w.T * acc)[0], z_fd)))
    return fns


class _LazyHessian:
    def __init__(self, build: Callable[[], Callable]):
        self._build = build
        self._fn: Callable | None = None

    def __call__(self, *args):
        if self._fn is None:
            self._fn = self._build()
        return self._fn(*args)
