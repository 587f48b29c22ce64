import numpy as np
import pytest

from endpoint_ddp.errors import DimensionMismatch
from endpoint_ddp.model import (
    DenseLayout,
    Problem,
    TerminalCost,
    assemble_dense_kkt,
    check_derivatives,
    evaluate,
    kkt_residual,
    linearize,
    vector_difference,
    wrapped_difference,
)
from endpoint_ddp.problems import LinearQuadraticStage, ProblemSpec, build, random_lq_approximation, random_lq_problem
from endpoint_ddp.saddle import solve_kkt_dense
from oracles import max_rel_diff, qp_oracle, scalar_problem


def small_dpend(formulation="forward", **kw):
    return build(ProblemSpec("dpend", formulation, horizon=kw.pop("horizon", 10), **kw))


class TestStateDifference:
    def test_vector(self):
        np.testing.assert_array_equal(vector_difference(np.array([3.0, 1.0]), np.array([1.0, 1.0])), [2.0, 0.0])

    @pytest.mark.parametrize(
        "a, b, expected",
        [
            (0.1, -0.1, 0.2),
            (np.pi - 0.1, -np.pi + 0.1, -0.2),
            (-np.pi + 0.1, np.pi - 0.1, 0.2),
            (4 * np.pi, 0.0, 0.0),
        ],
    )
    def test_wraps_angles(self, a, b, expected):
        diff = wrapped_difference([0])
        d = diff(np.array([a, 5.0]), np.array([b, 2.0]))
        assert d[0] == pytest.approx(expected, abs=1e-12)
        assert d[1] == 3.0

    def test_stacked_input_matches_rows(self):
        diff = wrapped_difference([1])
        rng = np.random.default_rng(0)
        a, b = 10 * rng.standard_normal((6, 3)), 10 * rng.standard_normal((6, 3))
        np.testing.assert_allclose(diff(a, b), np.stack([diff(x, y) for x, y in zip(a, b)]), atol=1e-12)


class TestEvaluate:
    def test_feasible_zero_trajectory(self):
        prob = build(ProblemSpec("lqr", initial_state=[0.0] * 4, horizon=5))
        it = evaluate(prob, np.zeros((6, 4)), np.zeros((5, 2)))
        assert it.gap_l1() == (0.0, 0.0, 0.0)

    def test_single_stage_gap(self):
        it = evaluate(scalar_problem(), np.array([[0.0], [0.5]]), np.array([[1.0]]))
        assert it.fbar[1, 0] == pytest.approx(0.5)
        assert it.fbar[0, 0] == 0.0
        assert it.rbar[0] == pytest.approx(0.5)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            evaluate(scalar_problem(), np.zeros((3, 1)), np.zeros((1, 1)))

    def test_gaps_match_callbacks(self):
        prob = small_dpend("inverse")
        rng = np.random.default_rng(7)
        xs = rng.standard_normal((prob.horizon + 1, prob.nx))
        us = rng.standard_normal((prob.horizon, prob.nu))
        it = evaluate(prob, xs, us)
        diff = prob.state_diff
        np.testing.assert_allclose(it.fbar[0], diff(prob.initial_state, xs[0]))
        for k, s in enumerate(prob.stages):
            np.testing.assert_allclose(it.fbar[k + 1], diff(s.dynamics(xs[k], us[k]), xs[k + 1]))
            np.testing.assert_allclose(it.hbar[k], s.constraint(xs[k], us[k]))
        np.testing.assert_allclose(it.rbar, prob.endpoint.residual(xs[-1]))
        cost = sum(s.cost(xs[k], us[k]) for k, s in enumerate(prob.stages)) + prob.terminal.cost(xs[-1])
        assert it.cost == pytest.approx(cost, rel=1e-14)

    def test_problem_rejects_inconsistent_stages(self):
        with pytest.raises(DimensionMismatch):
            Problem(np.zeros(1), [LinearQuadraticStage([[1.0]], [[1.0]]), LinearQuadraticStage(np.eye(2), np.eye(2))],
                    TerminalCost([[1.0]], [0.0]))


class TestLinearize:
    def test_lq_fixed_point(self):
        prob = random_lq_problem(3, N=4, nh=1)
        rng = np.random.default_rng(1)
        it = evaluate(prob, rng.standard_normal((5, 4)), rng.standard_normal((4, 2)))
        lq = linearize(prob, it)
        for k, s in enumerate(prob.stages):
            np.testing.assert_array_equal(lq.fx[k], s.A)
            np.testing.assert_array_equal(lq.fu[k], s.B)
            np.testing.assert_array_equal(lq.Lxx[k], s.Q)
            np.testing.assert_array_equal(lq.Luu[k], s.R)
            np.testing.assert_array_equal(lq.hu[k], s.Hu)
        np.testing.assert_array_equal(lq.rx, prob.endpoint.rows)

    def test_upright_double_pendulum_hand_linearization(self):
        m1, m2, l1, l2, g, dt = 1.0, 1.0, 0.5, 0.5, 9.81, 0.01
        prob = small_dpend(initial_state=[0.0, 0.0, 0.0, 0.0], dt=dt)
        it = evaluate(prob, np.zeros((11, 4)), np.zeros((10, 1)))
        lq = linearize(prob, it)
        M = np.array([
            [(m1 + m2) * l1**2 + m2 * l2**2 + 2 * m2 * l1 * l2, m2 * l2**2 + m2 * l1 * l2],
            [m2 * l2**2 + m2 * l1 * l2, m2 * l2**2],
        ])
        # potential g [(m1 + m2) l1 cos q1 + m2 l2 cos(q1 + q2)] has negative curvature at the top
        G = g * np.array([[(m1 + m2) * l1 + m2 * l2, m2 * l2], [m2 * l2, m2 * l2]])
        aq = np.linalg.solve(M, G)
        eye = np.eye(2)
        fx = np.block([[eye + dt * dt * aq, dt * eye], [dt * aq, eye]])
        np.testing.assert_allclose(lq.fx[0], fx, atol=1e-12)
        np.testing.assert_allclose(lq.fu[0][2:, 0], dt * np.linalg.solve(M, [1.0, 0.0]), atol=1e-12)

    @pytest.mark.parametrize("mode", ["gauss-newton", "exact-callback"])
    def test_deterministic(self, mode):
        prob = small_dpend("inverse")
        rng = np.random.default_rng(2)
        it = evaluate(prob, rng.standard_normal((11, 4)), rng.standard_normal((10, 3)),
                      gamma=rng.standard_normal((10, 2)), xi=rng.standard_normal((11, 4)))
        a, b = linearize(prob, it, mode), linearize(prob, it, mode)
        for name in ("Lxx", "Lxu", "Luu", "fx", "fu", "hx", "hu", "lx", "lu"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_hessians_symmetric(self):
        prob = small_dpend("inverse")
        rng = np.random.default_rng(3)
        it = evaluate(prob, rng.standard_normal((11, 4)), rng.standard_normal((10, 3)),
                      gamma=rng.standard_normal((10, 2)))
        lq = linearize(prob, it, "exact-callback")
        assert np.abs(lq.Lxx - lq.Lxx.transpose(0, 2, 1)).max() <= 1e-12
        assert np.abs(lq.Luu - lq.Luu.transpose(0, 2, 1)).max() <= 1e-12

    def test_exact_mode_adds_constraint_curvature(self):
        prob = small_dpend("inverse")
        rng = np.random.default_rng(4)
        xs, us = rng.standard_normal((11, 4)), rng.standard_normal((10, 3))
        gn = linearize(prob, evaluate(prob, xs, us, gamma=rng.standard_normal((10, 2))), "gauss-newton")
        ex = linearize(prob, evaluate(prob, xs, us, gamma=rng.standard_normal((10, 2))), "exact-callback")
        assert np.abs(ex.Lxx - gn.Lxx).max() > 1e-3

    def test_exact_mode_matches_finite_difference_lagrangian(self):
        prob = small_dpend("forward", horizon=2)
        rng = np.random.default_rng(5)
        xs, us = 0.5 * rng.standard_normal((3, 4)), rng.standard_normal((2, 1))
        xi = rng.standard_normal((3, 4))
        lq = linearize(prob, evaluate(prob, xs, us, xi=xi), "exact-callback")
        stage = prob.stages[0]

        def grad(z):
            x, u = z[:4], z[4:]
            lx, lu, *_ = stage.cost_derivatives(x, u)
            fx, fu = stage.dynamics_jacobians(x, u)
            return np.concatenate([lx + fx.T @ xi[1], lu + fu.T @ xi[1]])

        z = np.concatenate([xs[0], us[0]])
        h = 1e-6
        H = np.column_stack([(grad(z + h * e) - grad(z - h * e)) / (2 * h) for e in np.eye(5)])
        np.testing.assert_allclose(lq.Lxx[0], H[:4, :4], atol=1e-6)
        np.testing.assert_allclose(lq.Lxu[0], H[:4, 4:], atol=1e-6)
        np.testing.assert_allclose(lq.Luu[0], H[4:, 4:], atol=1e-6)


class TestDenseLayout:
    def test_round_trip(self):
        lay = DenseLayout(3, 2, 1, 1)
        rng = np.random.default_rng(0)
        parts = rng.standard_normal((4, 2)), rng.standard_normal((3, 1)), rng.standard_normal((4, 2)), rng.standard_normal((3, 1))
        w = lay.pack(*parts)
        assert w.shape == (lay.size,) == (3 * 6 + 4,)
        for a, b in zip(lay.unpack(w), parts):
            np.testing.assert_array_equal(a, b)

    def test_blocks_tile_the_vector(self):
        lay = DenseLayout(2, 3, 2, 1)
        seen = np.zeros(lay.size, dtype=int)
        for k in range(lay.N + 1):
            seen[lay.xi(k)] += 1
            seen[lay.x(k)] += 1
            if k < lay.N:
                seen[lay.u(k)] += 1
                seen[lay.gamma(k)] += 1
        assert np.all(seen == 1)


class TestAssembleDenseKKT:
    def test_smallest_instance_pattern(self):
        prob = scalar_problem(target=1.0)
        lq = linearize(prob, evaluate(prob, np.zeros((2, 1)), np.zeros((1, 1))))
        sys = assemble_dense_kkt(lq)
        # order: xi_0, dx_0, du_0, xi_1, dx_1
        A = np.array([
            [0, -1, 0, 0, 0],
            [-1, 1, 0, 1, 0],
            [0, 0, 1, 1, 0],
            [0, 1, 1, 0, -1],
            [0, 0, 0, -1, 1],
        ], dtype=float)
        np.testing.assert_array_equal(sys.A, A)
        np.testing.assert_array_equal(sys.B, [[0, 0, 0, 0, 1]])
        np.testing.assert_array_equal(sys.b, [1.0])

    def test_no_endpoint(self):
        lq = random_lq_approximation(1, nr=0)
        sys = assemble_dense_kkt(lq)
        assert sys.B.shape == (0, sys.n_w)
        assert sys.b.shape == (0,)

    @pytest.mark.parametrize("nh", [0, 1])
    def test_matches_independent_qp(self, nh):
        lq = random_lq_approximation(13, N=5, nh=nh)
        sol = solve_kkt_dense(assemble_dense_kkt(lq))
        dx, du, xi, gamma = DenseLayout.of(lq).unpack(sol.w)
        ref = qp_oracle(lq)
        assert max_rel_diff(dx, ref.dx) <= 1e-9
        assert max_rel_diff(du, ref.du) <= 1e-9
        assert max_rel_diff(xi, ref.xi) <= 1e-9
        assert max_rel_diff(gamma, ref.gamma) <= 1e-9
        assert max_rel_diff(sol.y, ref.beta) <= 1e-9

    def test_regularization_enters_control_blocks(self):
        lq = random_lq_approximation(2)
        lay = DenseLayout.of(lq)
        diff = assemble_dense_kkt(lq, 0.3).A - assemble_dense_kkt(lq).A
        expected = np.zeros_like(diff)
        for k in range(lay.N):
            expected[lay.u(k), lay.u(k)] = 0.3 * np.eye(lay.nu)
        np.testing.assert_allclose(diff, expected, atol=1e-15)


class TestKKTResidual:
    def test_zero_at_oracle_solution(self):
        prob = random_lq_problem(4, nh=1)
        xs, us = np.zeros((6, 4)), np.zeros((5, 2))
        lq = linearize(prob, evaluate(prob, xs, us))
        ref = qp_oracle(lq)
        it = evaluate(prob, xs + ref.dx, us + ref.du, ref.xi, ref.gamma, ref.beta)
        assert kkt_residual(linearize(prob, it), it) <= 1e-10

    def test_positive_away_from_solution(self):
        prob = random_lq_problem(4)
        it = evaluate(prob, np.zeros((6, 4)), np.zeros((5, 2)))
        assert kkt_residual(linearize(prob, it), it) > 1e-3


class TestCheckDerivatives:
    def test_lq_exact(self):
        prob = random_lq_problem(0, nh=1)
        rng = np.random.default_rng(0)
        worst = check_derivatives(prob, rng.standard_normal((6, 4)), rng.standard_normal((5, 2)))
        assert max(worst.values()) <= 1e-8
        assert {"f_x", "f_u", "h_x", "h_u", "l_x", "l_u", "l_xN", "r_x"} <= set(worst)

    def test_detects_wrong_jacobian(self):
        class Broken(LinearQuadraticStage):
            def dynamics_jacobians(self, x, u):
                return self.A + 1e-3, self.B

        prob = Problem(np.zeros(1), [Broken([[1.0]], [[1.0]])], TerminalCost([[1.0]], [0.0]))
        worst = check_derivatives(prob, np.ones((2, 1)), np.ones((1, 1)))
        assert worst["f_x"] > 1e-5
