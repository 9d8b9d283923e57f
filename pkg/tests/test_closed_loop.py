import numpy as np
import numpy.testing as npt
import pytest

from ddtmpc import closed_loop, plant
from ddtmpc.closed_loop import (
    ClosedLoopLog, Experiment, TargetSchedule, fit_decay, run, run_sweep,
    verify_theorem2)
from ddtmpc.equilibria import TargetSetpoint, optimal_reachable_equilibrium
from ddtmpc.hankel import DataTrajectory, generate_pe_input
from ddtmpc.mpc import MpcConfig
from ddtmpc.qp import QpSettings
from ddtmpc.sets import BoxSet


def small_system():
    return plant.random_minimal(2, 1, 1, seed=7)


def small_config(**overrides):
    kwargs = dict(
        horizon=8, order=2, q_weight=5.0, r_weight=1.0, s_weight=0.0,
        t_weight=200.0, alpha_reg=1e-4,
        input_box=BoxSet([-3.0], [3.0]), output_box=BoxSet([-3.0], [3.0]))
    kwargs.update(overrides)
    return MpcConfig(**kwargs)


def small_target(sys):
    # a comfortably reachable output level for the unit input range
    return np.array([0.8 * float(plant.dc_gain(sys)[0, 0])])


def small_experiment(**overrides):
    sys = small_system()
    kwargs = dict(
        plant=sys, config=small_config(), schedule=small_target(sys),
        t_sim=40, data_length=60, data_bounds=(-1.0, 1.0), data_seed=3,
        snapshot_times=(0, 5, 10))
    kwargs.update(overrides)
    return Experiment(**kwargs)


@pytest.fixture(scope="module")
def small_run():
    exp = small_experiment()
    log, metrics = run(exp)
    return exp, log, metrics


@pytest.fixture(scope="module")
def zero_reg_run():
    """The regularization-free case whose costs obey the exact Lyapunov
    decrease; kept small so it stays fast."""
    exp = small_experiment(config=small_config(alpha_reg=0.0), t_sim=30)
    log, metrics = run(exp)
    return exp, log, metrics


class TestFitDecay:
    def test_geometric_series_recovers_rate(self):
        series = 2.0 ** -np.arange(60.0)
        fit = fit_decay(series, window=20)
        assert abs(fit.rate - 0.5) < 1e-9
        assert fit.r_squared > 0.999999
        assert fit.fit_length == 20
        assert not fit.degenerate

    def test_constant_series_has_unit_rate(self):
        fit = fit_decay(np.ones(40), window=10)
        assert abs(fit.rate - 1.0) < 1e-12
        assert fit.r_squared == 1.0

    def test_fit_stops_at_noise_floor(self):
        # decays cleanly for 8 points, then sits at solver noise
        series = np.concatenate([10.0 ** -np.arange(8.0), np.full(40, 1e-9)])
        fit = fit_decay(series, window=20)
        assert fit.fit_length == 7
        assert abs(fit.rate - 0.1) < 1e-9

    def test_series_starting_below_floor_is_degenerate(self):
        fit = fit_decay(np.full(40, 1e-10), window=10)
        assert fit.degenerate
        assert fit.rate == 1.0
        assert fit.r_squared == 0.0

    def test_input_validation(self):
        with pytest.raises(ValueError):
            fit_decay(np.ones(40), window=1)
        with pytest.raises(ValueError, match="points"):
            fit_decay(np.ones(10), window=10)
        with pytest.raises(ValueError):
            fit_decay(np.array([1.0, -1.0, 1.0, 1.0]), window=2)


class TestTargetSchedule:
    def test_constant_covers_whole_run(self):
        sched = TargetSchedule.constant(np.array([1.0]))
        segs = sched.segments(50)
        assert len(segs) == 1
        start, end, target = segs[0]
        assert (start, end) == (0, 50)
        assert isinstance(target, TargetSetpoint)

    def test_entries_coerced_to_setpoints(self):
        sched = TargetSchedule([(0, np.array([1.0])), (10, TargetSetpoint([2.0]))])
        assert all(isinstance(t, TargetSetpoint) for _, t in sched.entries)

    def test_segment_boundaries(self):
        sched = TargetSchedule([(0, [1.0]), (20, [2.0])])
        segs = sched.segments(50)
        assert [(s, e) for s, e, _ in segs] == [(0, 20), (20, 50)]

    def test_first_entry_must_start_at_zero(self):
        with pytest.raises(ValueError, match="t = 0"):
            TargetSchedule([(5, [1.0])])

    def test_starts_must_strictly_increase(self):
        with pytest.raises(ValueError, match="increase"):
            TargetSchedule([(0, [1.0]), (10, [2.0]), (10, [3.0])])

    def test_empty_schedule_rejected(self):
        with pytest.raises(ValueError):
            TargetSchedule([])

    def test_entry_beyond_run_rejected(self):
        sched = TargetSchedule([(0, [1.0]), (30, [2.0])])
        with pytest.raises(ValueError, match="30"):
            sched.segments(30)


class TestExperiment:
    def test_bare_target_becomes_constant_schedule(self):
        exp = small_experiment()
        assert isinstance(exp.schedule, TargetSchedule)
        assert len(exp.schedule.entries) == 1

    def test_t_sim_must_be_positive(self):
        with pytest.raises(ValueError, match="t_sim"):
            small_experiment(t_sim=0)

    def test_x0_shape_checked(self):
        with pytest.raises(ValueError, match="x0"):
            small_experiment(x0=np.zeros(3))

    def test_short_warmup_rejected(self):
        with pytest.raises(ValueError, match="at least"):
            small_experiment(warmup=np.zeros((1, 1)))

    def test_default_warmup_is_zero_input(self):
        exp = small_experiment()
        npt.assert_array_equal(exp.warmup, np.zeros((2, 1)))

    def test_negative_snapshot_time_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            small_experiment(snapshot_times=(-1, 5))

    def test_schedule_must_fit_run(self):
        sched = TargetSchedule([(0, [0.1]), (50, [0.2])])
        with pytest.raises(ValueError):
            small_experiment(schedule=sched, t_sim=40)


class TestClosedLoopRun:
    def test_run_completes_and_converges(self, small_run):
        exp, log, metrics = small_run
        assert log.completed
        assert log.aborted_at is None
        assert len(log) == exp.t_sim
        assert all(r.status == "optimal" for r in log.records)
        assert metrics.final_error < 1e-4
        assert metrics.settling_time < 10

    def test_log_series_shapes(self, small_run):
        exp, log, _ = small_run
        npt.assert_array_equal(log.t, np.arange(exp.t_sim))
        assert log.u.shape == (exp.t_sim, 1)
        assert log.y.shape == (exp.t_sim, 1)
        assert log.tracking_error.shape == (exp.t_sim,)
        # the error collapses by orders of magnitude over the run
        assert log.tracking_error[-1] < 1e-3 * log.tracking_error[0]
        assert log.equilibrium_distance[-1] < 1e-4

    def test_constraints_hold_with_margin(self, small_run):
        exp, log, metrics = small_run
        margins_u, margins_y = log.constraint_margins(
            exp.config.input_box, exp.config.output_box)
        assert np.min(margins_u) > 0
        assert np.min(margins_y) > 0
        assert metrics.max_input_violation == 0.0
        assert metrics.max_output_violation == 0.0

    def test_predictions_kept_only_at_snapshots(self, small_run):
        exp, log, _ = small_run
        kept = [r.t for r in log.records if r.predicted_y is not None]
        assert kept == [0, 5, 10]
        rec = log.records[5]
        assert rec.predicted_u.shape == (exp.config.horizon + 1, 1)
        assert rec.predicted_y.shape == (exp.config.horizon + 1, 1)

    def test_reference_matches_reachable_optimum(self, small_run):
        exp, log, _ = small_run
        sys = exp.plant
        cfg = exp.config
        u_d = generate_pe_input(1, exp.data_length, bounds=exp.data_bounds,
                                seed=exp.data_seed)
        data = DataTrajectory.from_trajectory(
            plant.simulate(sys, np.zeros(sys.n), u_d))
        eq = optimal_reachable_equilibrium(
            data, TargetSetpoint(small_target(sys)), cfg.eq_input_box,
            cfg.eq_output_box, cfg.order, s_weight=cfg.s_mat,
            t_weight=cfg.t_mat)
        ref = log.reference_at(0)
        npt.assert_allclose(ref.y_ref, eq.y_s, atol=1e-9)
        npt.assert_allclose(ref.u_ref, eq.u_s, atol=1e-9)

    def test_reference_lookup_outside_run_fails(self, small_run):
        _, log, _ = small_run
        with pytest.raises(ValueError, match="no schedule segment"):
            log.reference_at(40)
        with pytest.raises(ValueError):
            log.reference_at(-1)

    def test_metrics_internals(self, small_run):
        exp, _, metrics = small_run
        assert np.all(metrics.stage_costs >= 0)
        assert len(metrics.state_error) == exp.t_sim
        assert not metrics.decay.degenerate
        assert metrics.decay.rate < 1.0
        assert metrics.decay.r_squared > 0.9
        assert len(metrics.per_segment) == 1
        seg = metrics.per_segment[0]
        assert seg["start"] == 0 and seg["end"] == exp.t_sim
        assert seg["final_error"] == metrics.final_error

    def test_runs_are_deterministic(self):
        log_a, met_a = run(small_experiment(t_sim=12))
        log_b, met_b = run(small_experiment(t_sim=12))
        npt.assert_array_equal(log_a.u, log_b.u)
        npt.assert_array_equal(log_a.y, log_b.y)
        npt.assert_array_equal(log_a.costs, log_b.costs)
        assert [r.solver_iterations for r in log_a.records] == \
            [r.solver_iterations for r in log_b.records]
        assert met_a.final_error == met_b.final_error

    def test_started_at_equilibrium_stays_there(self):
        sys = small_system()
        cfg = small_config()
        u_d = generate_pe_input(1, 60, bounds=(-1.0, 1.0), seed=3)
        data = DataTrajectory.from_trajectory(
            plant.simulate(sys, np.zeros(2), u_d))
        eq = optimal_reachable_equilibrium(
            data, TargetSetpoint(small_target(sys)), cfg.eq_input_box,
            cfg.eq_output_box, cfg.order, s_weight=cfg.s_mat,
            t_weight=cfg.t_mat)
        ss = plant.steady_state_from_input(sys, eq.u_s)
        exp = small_experiment(
            t_sim=25, x0=ss.x_s, warmup=np.tile(eq.u_s, (cfg.order, 1)))
        log, _ = run(exp)
        assert np.max(np.abs(log.y - eq.y_s)) < 1e-4
        assert np.max(np.abs(log.u - eq.u_s)) < 1e-4

    def test_two_segment_schedule(self):
        sys = small_system()
        target = small_target(sys)
        sched = TargetSchedule([(0, target), (15, 0.5 * target)])
        exp = small_experiment(schedule=sched, t_sim=30)
        log, metrics = run(exp)
        assert log.completed
        assert len(metrics.per_segment) == 2
        first, second = metrics.per_segment
        assert (first["start"], first["end"]) == (0, 15)
        assert (second["start"], second["end"]) == (15, 30)
        # both segments settle into the band well before they end
        assert first["settled_at"] < 15
        assert second["settled_at"] < 25
        assert second["final_error"] < 1e-3
        # the error is measured against the active segment: it jumps at
        # the switch and decays again
        err = log.tracking_error
        assert err[15] > 10 * err[14]
        assert err[-1] < 1e-2 * err[15]
        assert metrics.settling_time == second["settled_at"]


class TestAbortedRun:
    def test_unreachable_output_box_aborts_run(self):
        # the plant is parked far outside a tiny output box, so the very
        # first step QP has no feasible window
        sys = small_system()
        cfg = small_config(
            output_box=BoxSet([-0.1], [0.1]),
            solver_settings=QpSettings(max_iter=3000))
        exp = Experiment(
            plant=sys, config=cfg, schedule=np.array([0.0]), t_sim=10,
            data_length=60, data_bounds=(-1.0, 1.0), data_seed=3,
            x0=np.array([40.0, 40.0]))
        log, metrics = run(exp)
        assert log.aborted_at == 0
        assert not log.completed
        assert len(log) == 0
        assert "status" in log.abort_reason
        assert metrics.final_error == np.inf
        report = verify_theorem2(log, metrics)
        assert not report.all_pass
        feasibility = dict((name, detail) for name, _, detail in report.items)
        assert "step 0" in feasibility["feasibility"]


class TestVerifyTheorem2:
    def test_healthy_run_passes(self, small_run):
        _, log, metrics = small_run
        report = verify_theorem2(log, metrics)
        assert report.all_pass
        names = [name for name, _, _ in report.items]
        assert names == ["feasibility", "constraints", "stability"]
        assert "pass" in str(report)
        assert "FAIL" not in str(report)

    def test_regularized_run_skips_cost_item(self, small_run):
        _, log, metrics = small_run
        report = verify_theorem2(log, metrics)
        assert "cost decrease" not in [name for name, _, _ in report.items]

    def test_zero_reg_costs_decrease_by_stage_cost(self, zero_reg_run):
        _, log, metrics = zero_reg_run
        npt.assert_array_equal(log.costs, log.costs_unregularized)
        diffs = log.costs[1:] - (log.costs[:-1] - metrics.stage_costs[:-1])
        assert np.max(diffs) <= 1e-6

    def test_zero_reg_report_includes_cost_item(self, zero_reg_run):
        _, log, metrics = zero_reg_run
        report = verify_theorem2(log, metrics)
        assert report.all_pass
        items = dict((name, ok) for name, ok, _ in report.items)
        assert items["cost decrease"]

    def test_zero_reg_telescoped_decrease(self, zero_reg_run):
        exp, _, metrics = zero_reg_run
        assert len(metrics.cost_decrease) == exp.t_sim - exp.config.order
        assert np.all(metrics.cost_decrease <= 1e-6)

    def test_band_controls_stability_verdict(self, small_run):
        _, log, metrics = small_run
        tight = verify_theorem2(log, metrics, band=1e-9)
        verdicts = dict((name, ok) for name, ok, _ in tight.items)
        assert not verdicts["stability"]
        assert not tight.all_pass


class TestRunSweep:
    def test_sweep_matches_sequential_runs(self):
        seeds = [1, 2, 5]
        experiments = {
            f"seed-{s}": small_experiment(data_seed=s, t_sim=12)
            for s in seeds}
        results = run_sweep(experiments)
        assert list(results) == sorted(experiments)
        for s in seeds:
            log, metrics = results[f"seed-{s}"]
            ref_log, ref_metrics = run(small_experiment(data_seed=s, t_sim=12))
            npt.assert_array_equal(log.y, ref_log.y)
            assert metrics.final_error == ref_metrics.final_error
            assert log.completed

    def test_empty_log_metrics(self):
        log = ClosedLoopLog([], [], data=None, aborted_at=0,
                            abort_reason="boom")
        assert len(log) == 0
        assert log.tracking_error.shape == (0,)
        assert log.equilibrium_distance.shape == (0,)
