import numpy as np
import numpy.testing as npt
import pytest

from ddtmpc import qp

from oracles import random_box_eq_qp


def test_unconstrained_matches_linear_solve():
    rng = np.random.default_rng(1)
    root = rng.normal(size=(6, 6))
    P = root @ root.T + np.eye(6)
    q = rng.normal(size=6)
    sol = qp.solve_qp(qp.QpProblem(P, q))
    npt.assert_allclose(sol.z, -np.linalg.solve(P, q), atol=1e-10)
    assert sol.status == qp.OPTIMAL
    res = qp.kkt_residuals(qp.QpProblem(P, q), sol)
    assert res.max <= 1e-10


def test_box_clipping():
    # min .5||z - c||^2 over the unit box clips c onto the box
    c = np.array([3.0, -4.0, 0.2])
    prob = qp.QpProblem(np.eye(3), -c, lower=-np.ones(3), upper=np.ones(3))
    sol = qp.solve_qp(prob)
    npt.assert_allclose(sol.z, [1.0, -1.0, 0.2], atol=1e-9)


def test_single_equality():
    prob = qp.QpProblem(2 * np.eye(3), np.zeros(3), A=[[1.0, 1.0, 1.0]], b=[3.0])
    sol = qp.solve_qp(prob)
    npt.assert_allclose(sol.z, np.ones(3), atol=1e-9)
    assert sol.status == qp.OPTIMAL


def test_linear_program_corner():
    # pure linear cost over a box lands on a vertex
    prob = qp.QpProblem(np.zeros((2, 2)), [1.0, -2.0],
                        lower=[-1.0, -1.0], upper=[1.0, 1.0])
    sol = qp.solve_qp(prob)
    npt.assert_allclose(sol.z, [-1.0, 1.0], atol=1e-8)


def test_primal_infeasible_certificate():
    # sum z = 0 contradicts z >= 1 elementwise
    prob = qp.QpProblem(np.eye(2), np.zeros(2), A=[[1.0, 1.0]], b=[0.0],
                        lower=[1.0, 1.0], upper=[5.0, 5.0])
    sol = qp.solve_qp(prob)
    assert sol.status == qp.PRIMAL_INFEASIBLE
    assert sol.certificate is not None
    assert np.isnan(sol.objective)


def test_dual_infeasible_on_unbounded_direction():
    prob = qp.QpProblem(np.zeros((2, 2)), [1.0, 0.0],
                        lower=[-np.inf, -1.0], upper=[np.inf, 1.0])
    sol = qp.solve_qp(prob)
    assert sol.status == qp.DUAL_INFEASIBLE
    assert sol.certificate is not None


def test_warm_started_resolve_is_nearly_free():
    prob, _ = random_box_eq_qp(7)
    ws = qp.QpWorkspace(prob)
    first = ws.solve()
    again = ws.solve(warm_start=first.warm_start_state())
    assert first.status == again.status == qp.OPTIMAL
    assert again.iterations <= 5
    npt.assert_allclose(again.z, first.z, atol=1e-7)


def test_parametric_update_matches_fresh_solve():
    prob, _ = random_box_eq_qp(12)
    rng = np.random.default_rng(3)
    q2 = prob.q + 0.3 * rng.normal(size=prob.n)
    b2 = prob.b + 0.1 * rng.normal(size=prob.n_eq)
    ws = qp.QpWorkspace(prob)
    ws.solve()
    reused = ws.solve(q=q2, b=b2)
    fresh = qp.solve_qp(qp.QpProblem(prob.P, q2, prob.A, b2,
                                     prob.lower, prob.upper))
    assert reused.status == fresh.status == qp.OPTIMAL
    npt.assert_allclose(reused.z, fresh.z, atol=1e-7)


def test_polish_pins_active_bounds_exactly():
    c = np.array([3.0, -4.0, 0.2])
    prob = qp.QpProblem(np.eye(3), -c, lower=-np.ones(3), upper=np.ones(3))
    sol = qp.solve_qp(prob)
    assert sol.polished
    assert sol.z[0] == 1.0 and sol.z[1] == -1.0
    res = qp.kkt_residuals(prob, sol)
    assert res.bound_complementarity <= 1e-14


def test_kkt_residuals_flag_perturbed_point():
    rng = np.random.default_rng(5)
    root = rng.normal(size=(4, 4))
    prob = qp.QpProblem(root @ root.T + np.eye(4), rng.normal(size=4))
    sol = qp.solve_qp(prob)
    good = qp.kkt_residuals(prob, sol)
    assert good.max <= 1e-8
    bumped = qp.QpSolution(
        z=sol.z + 0.1, y_equality=sol.y_equality, y_bounds=sol.y_bounds,
        status=sol.status, iterations=sol.iterations,
        primal_residual=sol.primal_residual, dual_residual=sol.dual_residual,
        objective=sol.objective, polished=sol.polished,
    )
    assert qp.kkt_residuals(prob, bumped).stationarity >= 1e-3


def test_max_iter_status_keeps_residuals():
    prob, _ = random_box_eq_qp(21)
    sol = qp.solve_qp(prob, qp.QpSettings(max_iter=2, polish=False))
    assert sol.status == qp.MAX_ITER
    assert np.isfinite(sol.primal_residual)
    assert np.isfinite(sol.dual_residual)


def test_badly_scaled_problem_converges():
    # four orders of magnitude between the cost blocks
    P = np.diag([1e-4, 1e-4, 1e2, 1e2])
    q = np.array([1.0, -1.0, 50.0, -50.0])
    prob = qp.QpProblem(P, q, A=[[1.0, 1.0, 1.0, 1.0]], b=[1.0],
                        lower=-10 * np.ones(4), upper=10 * np.ones(4))
    sol = qp.solve_qp(prob)
    assert sol.status == qp.OPTIMAL
    assert qp.kkt_residuals(prob, sol).max <= 1e-7


def test_scaling_disabled_still_converges():
    prob, z_star = random_box_eq_qp(33)
    sol = qp.solve_qp(prob, qp.QpSettings(scaling_iters=0))
    assert sol.status == qp.OPTIMAL
    npt.assert_allclose(sol.z, z_star, atol=1e-6)


def test_random_instances_match_projected_gradient_oracle():
    for seed in range(40, 60):
        prob, z_star = random_box_eq_qp(seed)
        sol = qp.solve_qp(prob)
        assert sol.status == qp.OPTIMAL, f"seed {seed}"
        f_star = prob.objective(z_star)
        gap = abs(sol.objective - f_star) / max(1.0, abs(f_star))
        assert gap <= 1e-6, f"seed {seed}: objective gap {gap:.3e}"
        npt.assert_allclose(sol.z, z_star, atol=1e-4,
                            err_msg=f"seed {seed}")


def test_problem_validation():
    with pytest.raises(ValueError, match="symmetric"):
        qp.QpProblem([[1.0, 2.0], [0.0, 1.0]], [0.0, 0.0])
    with pytest.raises(ValueError, match="lower"):
        qp.QpProblem(np.eye(2), np.zeros(2), lower=[1.0, 0.0], upper=[0.0, 1.0])
    with pytest.raises(ValueError, match="columns"):
        qp.QpProblem(np.eye(2), np.zeros(2), A=[[1.0, 2.0, 3.0]], b=[0.0])
    with pytest.raises(ValueError):
        qp.QpSettings(over_relaxation=2.5)
    with pytest.raises(ValueError):
        qp.QpSettings(rho=-1.0)


def test_objective_offset_is_reported():
    prob = qp.QpProblem(np.eye(1), [0.0], offset=2.5)
    sol = qp.solve_qp(prob)
    assert abs(sol.objective - 2.5) <= 1e-12


def test_dump_load_round_trip_is_exact(tmp_path):
    prob, _ = random_box_eq_qp(71)
    prob.var_slices["head"] = slice(0, 3)
    prob.var_slices["tail"] = slice(3, prob.n)
    path = tmp_path / "problem.npz"
    qp.dump_problem(prob, path)
    back = qp.load_problem(path)
    for name in ("P", "q", "A", "b", "lower", "upper"):
        npt.assert_array_equal(getattr(back, name), getattr(prob, name))
    assert back.var_slices == prob.var_slices
    assert back.offset == prob.offset
