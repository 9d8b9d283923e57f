import numpy as np
import numpy.testing as npt
import pytest

from ddtmpc import hankel, plant, qp
from ddtmpc.equilibria import TargetSetpoint
from ddtmpc.mpc import Controller, ControllerError, History, MpcConfig
from ddtmpc.sets import BoxSet

U_BOX = BoxSet([-1.2, -2.0], [1.2, 2.0])
Y_BOX = BoxSet([0.0, 0.0], [1.2, 1.2])


def tank_config(**overrides):
    kwargs = dict(
        horizon=24, order=4, q_weight=5.0, r_weight=1.0,
        input_box=U_BOX, output_box=Y_BOX, t_weight=200.0, s_weight=0.0)
    kwargs.update(overrides)
    return MpcConfig(**kwargs)


@pytest.fixture(scope="module")
def tank_data():
    sys = plant.four_tank()
    u = hankel.generate_pe_input(2, 100, seed=42)
    traj = plant.simulate(sys, np.zeros(4), u)
    return sys, hankel.DataTrajectory.from_trajectory(traj)


@pytest.fixture(scope="module")
def tank_run(tank_data):
    """Thirty closed-loop steps toward (1, 1) from rest.

    Returns the applied inputs, measured outputs, and the per-step
    solutions; several tests below pick the run apart.
    """
    sys, data = tank_data
    ctrl = Controller(data, tank_config())
    ctrl.set_target(TargetSetpoint([1.0, 1.0]))
    hist = History.zeros(4, 2, 2)
    x = np.zeros(4)
    inputs, outputs, sols = [], [], []
    for _ in range(30):
        u_t, sol = ctrl.solve_step(hist)
        y_t = sys.C @ x + sys.D @ u_t
        hist = hist.push(u_t, y_t)
        x = sys.A @ x + sys.B @ u_t
        inputs.append(u_t)
        outputs.append(y_t)
        sols.append(sol)
    return np.array(inputs), np.array(outputs), sols


class TestHistory:
    def test_push_rolls_and_returns_new_object(self):
        hist = History.zeros(3, 2, 1)
        out = hist.push([1.0, 2.0], [3.0])
        assert out is not hist
        npt.assert_array_equal(out.u[-1], [1.0, 2.0])
        npt.assert_array_equal(out.y[-1], [3.0])
        npt.assert_array_equal(out.u[:-1], hist.u[1:])
        # the original is untouched
        npt.assert_array_equal(hist.u, np.zeros((3, 2)))

    def test_arrays_are_readonly(self):
        hist = History.zeros(2, 1, 1)
        with pytest.raises(ValueError):
            hist.u[0, 0] = 1.0

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError):
            History(np.zeros((3, 2)), np.zeros((2, 2)))


class TestMpcConfig:
    def test_short_horizon_rejected(self):
        with pytest.raises(ValueError, match="L ≥ 2n"):
            tank_config(horizon=7)

    def test_boundary_horizon_accepted(self):
        cfg = tank_config(horizon=8)
        assert cfg.horizon == 8

    def test_weights_must_be_positive_definite(self):
        with pytest.raises(ValueError):
            tank_config(q_weight=-1.0)
        with pytest.raises(ValueError):
            tank_config(t_weight=0.0)

    def test_zero_s_weight_allowed(self):
        cfg = tank_config(s_weight=0.0)
        assert np.all(cfg.s_mat == 0.0)

    def test_shrunk_boxes_default_to_099(self):
        cfg = tank_config()
        npt.assert_allclose(cfg.eq_input_box.upper, [1.188, 1.98])
        npt.assert_allclose(cfg.eq_output_box.upper, [1.188, 1.188])


class TestControllerConstruction:
    def test_insufficient_data_for_horizon(self, tank_data):
        # L = 25 needs excitation of order 34, which 100 samples of a
        # two-input signal cannot supply
        _, data = tank_data
        with pytest.raises(hankel.PersistenceError) as exc:
            Controller(data, tank_config(horizon=25))
        assert "101" in str(exc.value) and "100" in str(exc.value)

    def test_channel_mismatch_rejected(self, tank_data):
        _, data = tank_data
        bad = tank_config(input_box=BoxSet([-1.0], [1.0]))
        with pytest.raises(ValueError):
            Controller(data, bad)

    def test_solve_without_target_fails(self, tank_data):
        _, data = tank_data
        ctrl = Controller(data, tank_config())
        with pytest.raises(ControllerError):
            ctrl.solve_step(History.zeros(4, 2, 2))


class TestClosedLoopRun:
    def test_every_step_optimal(self, tank_run):
        _, _, sols = tank_run
        assert all(s.status == qp.OPTIMAL for s in sols)

    def test_tracking_error_shrinks(self, tank_run):
        _, outputs, _ = tank_run
        err = np.max(np.abs(outputs - 1.0), axis=1)
        assert err[-1] < 0.25 * err[0]

    def test_predictions_respect_operating_boxes(self, tank_run):
        _, _, sols = tank_run
        for sol in sols:
            assert np.all(sol.predicted_u >= U_BOX.lower - 1e-7)
            assert np.all(sol.predicted_u <= U_BOX.upper + 1e-7)
            assert np.all(sol.predicted_y >= Y_BOX.lower - 1e-7)
            assert np.all(sol.predicted_y <= Y_BOX.upper + 1e-7)

    def test_equilibrium_sits_in_shrunk_boxes(self, tank_run):
        _, _, sols = tank_run
        for sol in sols:
            assert np.all(np.abs(sol.u_s) <= U_BOX.scale(0.99).upper + 1e-7)
            assert np.all(sol.y_s <= Y_BOX.scale(0.99).upper + 1e-7)
            assert np.all(sol.y_s >= Y_BOX.scale(0.99).lower - 1e-7)

    def test_window_ends_parked_on_equilibrium(self, tank_run):
        _, _, sols = tank_run
        for sol in sols[::7]:
            tail_u = sol.predicted_u[-5:]
            tail_y = sol.predicted_y[-5:]
            npt.assert_allclose(tail_u, np.tile(sol.u_s, (5, 1)), atol=1e-6)
            npt.assert_allclose(tail_y, np.tile(sol.y_s, (5, 1)), atol=1e-6)

    def test_window_prepends_measured_history(self, tank_run):
        inputs, outputs, sols = tank_run
        sol = sols[10]
        npt.assert_allclose(sol.u_window[:4], inputs[6:10], atol=1e-12)
        npt.assert_allclose(sol.y_window[:4], outputs[6:10], atol=1e-12)

    def test_first_prediction_matches_measurement(self, tank_run):
        # the n-step history determines the current state, so the k = 0
        # output prediction must reproduce what the plant then measures
        _, outputs, sols = tank_run
        for t in (5, 15, 25):
            npt.assert_allclose(sols[t].predicted_y[0], outputs[t], atol=1e-5)

    def test_one_step_ahead_prediction_comes_true(self, tank_run):
        _, outputs, sols = tank_run
        for t in (5, 15, 25):
            npt.assert_allclose(sols[t].predicted_y[1], outputs[t + 1],
                                atol=1e-5)

    def test_cost_decreases_at_every_step(self, tank_run):
        _, _, sols = tank_run
        costs = np.array([s.cost_tracking for s in sols])
        assert np.all(np.diff(costs) < 0)
        assert costs[-1] < 0.05 * costs[0]

    def test_warm_start_cuts_iterations(self, tank_run):
        _, _, sols = tank_run
        iters = np.array([s.iterations for s in sols])
        assert np.median(iters[1:]) < 0.75 * iters[0]

    def test_alpha_reproduces_the_window(self, tank_data, tank_run):
        # the returned coefficient vector maps through the data Hankel
        # matrix back onto the optimized window
        _, data = tank_data
        _, _, sols = tank_run
        sol = sols[20]
        depth = 24 + 4 + 1
        h_u = hankel.hankel(data.u, depth)
        h_y = hankel.hankel(data.y, depth)
        win_u = (h_u.matrix @ sol.alpha).reshape(depth, 2)
        win_y = (h_y.matrix @ sol.alpha).reshape(depth, 2)
        npt.assert_allclose(win_u, sol.u_window, atol=1e-5)
        npt.assert_allclose(win_y, sol.y_window, atol=1e-5)


class TestWarmStartMechanics:
    def test_resolve_at_steady_state_is_cheap(self, tank_data):
        # an unchanged problem re-solved from the shifted candidate should
        # cost a small fraction of the cold start; the optima agree up to
        # the tolerance allowed by the problem conditioning. polish stays
        # off so the ratio measures the splitting iteration alone
        sys, data = tank_data
        ss = plant.steady_state_from_input(sys, [1.0, 1.8])
        cfg = tank_config(solver_settings=qp.QpSettings(polish=False))
        ctrl = Controller(data, cfg)
        ctrl.set_target(TargetSetpoint(ss.y_s))
        hist = History(np.tile(ss.u_s, (4, 1)), np.tile(ss.y_s, (4, 1)))
        _, first = ctrl.solve_step(hist)
        _, second = ctrl.solve_step(hist)
        assert second.iterations <= first.iterations // 10
        npt.assert_allclose(second.u_s, first.u_s, atol=1e-3)
        npt.assert_allclose(second.y_s, first.y_s, atol=1e-3)

    def test_shift_candidate_shifts_the_window(self, tank_data):
        sys, data = tank_data
        ss = plant.steady_state_from_input(sys, [1.0, 1.8])
        ctrl = Controller(data, tank_config())
        ctrl.set_target(TargetSetpoint(ss.y_s))
        hist = History(np.tile(ss.u_s, (4, 1)), np.tile(ss.y_s, (4, 1)))
        _, sol = ctrl.solve_step(hist)
        z0 = ctrl.shift_candidate(sol, ss.u_s, ss.y_s)
        win_u = z0[ctrl.sl_u].reshape(25, 2)
        win_y = z0[ctrl.sl_y].reshape(25, 2)
        npt.assert_allclose(win_u[:24], sol.predicted_u[1:], atol=1e-10)
        npt.assert_allclose(win_y[:24], sol.predicted_y[1:], atol=1e-10)
        # the appended step and the equilibrium slots carry (u_s, y_s)
        npt.assert_allclose(win_u[24], sol.u_s, atol=1e-10)
        npt.assert_allclose(z0[ctrl.sl_us], sol.u_s, atol=1e-10)
        npt.assert_allclose(z0[ctrl.sl_ys], sol.y_s, atol=1e-10)

    def test_target_change_mid_run(self, tank_data):
        sys, data = tank_data
        ctrl = Controller(data, tank_config())
        ctrl.set_target(TargetSetpoint([1.0, 1.0]))
        hist = History.zeros(4, 2, 2)
        x = np.zeros(4)
        for _ in range(10):
            u_t, _ = ctrl.solve_step(hist)
            y_t = sys.C @ x + sys.D @ u_t
            hist = hist.push(u_t, y_t)
            x = sys.A @ x + sys.B @ u_t
        target = np.array([0.3, 0.5])
        ctrl.set_target(TargetSetpoint(target))
        eq_gaps = []
        for _ in range(25):
            u_t, sol = ctrl.solve_step(hist)
            y_t = sys.C @ x + sys.D @ u_t
            hist = hist.push(u_t, y_t)
            x = sys.A @ x + sys.B @ u_t
            eq_gaps.append(np.max(np.abs(np.asarray(sol.y_s) - target)))
        assert sol.status == qp.OPTIMAL
        # the artificial equilibrium walks toward the new target; the plant
        # follows on a slower clock, so only the planner is checked here
        assert eq_gaps[-1] < 0.15
        assert eq_gaps[-1] < eq_gaps[0]


class TestFailureSurface:
    def test_fabricated_history_is_infeasible(self, tank_data):
        # a random (u, y) window is not a trajectory of any fourth-order
        # system consistent with the data, so the pinning rows cannot hold
        _, data = tank_data
        ctrl = Controller(data, tank_config())
        ctrl.set_target(TargetSetpoint([1.0, 1.0]))
        rng = np.random.default_rng(7)
        hist = History(rng.uniform(-1, 1, (4, 2)), rng.uniform(0, 1, (4, 2)))
        with pytest.raises(ControllerError) as exc:
            ctrl.solve_step(hist)
        assert exc.value.status == qp.PRIMAL_INFEASIBLE

    def test_recovers_after_failure(self, tank_data):
        sys, data = tank_data
        ctrl = Controller(data, tank_config())
        ctrl.set_target(TargetSetpoint([1.0, 1.0]))
        rng = np.random.default_rng(7)
        bad = History(rng.uniform(-1, 1, (4, 2)), rng.uniform(0, 1, (4, 2)))
        with pytest.raises(ControllerError):
            ctrl.solve_step(bad)
        _, sol = ctrl.solve_step(History.zeros(4, 2, 2))
        assert sol.status == qp.OPTIMAL
