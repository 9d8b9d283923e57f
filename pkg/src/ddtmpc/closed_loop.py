"""Closed-loop experiments: a hidden plant under the data-driven controller.

The runner collects one offline excitation trajectory, feeds the controller
nothing but that data and the measured history, and then executes the
receding-horizon loop against a target schedule. Everything the stability
argument promises (feasibility at every step, constraint satisfaction,
exponential-type convergence to the optimal reachable equilibrium) is
logged and condensed into metrics that tests can assert on.
"""

import concurrent.futures

import numpy as np

from . import plant as plant_mod
from .equilibria import TargetSetpoint, optimal_reachable_equilibrium
from .hankel import DataTrajectory, generate_pe_input
from .mpc import Controller, ControllerError, History


def _readonly(arr):
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


class TargetSchedule:
    """Piecewise-constant target setpoints over the run.

    Entries are ``(start_time, TargetSetpoint)`` pairs with strictly
    increasing start times; the first entry must start at t = 0.
    """

    def __init__(self, entries):
        cleaned = []
        for start, target in entries:
            start = int(start)
            if not isinstance(target, TargetSetpoint):
                target = TargetSetpoint(target)
            cleaned.append((start, target))
        if not cleaned:
            raise ValueError("schedule needs at least one entry")
        if cleaned[0][0] != 0:
            raise ValueError("the first schedule entry must start at t = 0")
        starts = [s for s, _ in cleaned]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("schedule start times must strictly increase")
        self.entries = tuple(cleaned)

    @classmethod
    def constant(cls, target):
        """A single target held for the whole run."""
        return cls([(0, target)])

    def segments(self, t_sim):
        """``(start, end, target)`` triples covering [0, t_sim)."""
        if self.entries[-1][0] >= t_sim:
            raise ValueError(
                f"schedule entry at t = {self.entries[-1][0]} lies beyond"
                f" the {t_sim}-step run")
        out = []
        for i, (start, target) in enumerate(self.entries):
            end = self.entries[i + 1][0] if i + 1 < len(self.entries) else t_sim
            out.append((start, end, target))
        return out


class Experiment:
    """Everything one closed-loop run needs, seeds included.

    Args:
        plant: The system being controlled; hidden from the controller.
        config: MpcConfig for the tracking controller.
        schedule: TargetSchedule (or a bare setpoint for a constant target).
        t_sim: Number of closed-loop steps.
        data_length, data_bounds, data_seed: Excitation experiment spec; the
            offline trajectory is collected from the origin.
        x0: Initial plant state for the control phase (default origin).
        warmup: Input sequence applied before control starts to populate the
            measured history; default is ``order`` steps of zero input.
        snapshot_times: Steps at which full predicted windows are kept.
        settling_band: Infinity-norm band on the tracking error used for the
            settling-time metric.
    """

    def __init__(self, plant, config, schedule, t_sim,
                 data_length=100, data_bounds=(-1.0, 1.0), data_seed=0,
                 x0=None, warmup=None, snapshot_times=(0, 12, 24, 36, 48),
                 settling_band=0.02):
        self.plant = plant
        self.config = config
        if not isinstance(schedule, TargetSchedule):
            schedule = TargetSchedule.constant(schedule)
        self.schedule = schedule
        self.t_sim = int(t_sim)
        if self.t_sim < 1:
            raise ValueError("t_sim must be at least 1")
        self.data_length = int(data_length)
        self.data_bounds = (float(data_bounds[0]), float(data_bounds[1]))
        self.data_seed = int(data_seed)
        self.x0 = (np.zeros(plant.n) if x0 is None
                   else np.ravel(np.asarray(x0, dtype=float)))
        if self.x0.shape != (plant.n,):
            raise ValueError(
                f"x0 has shape {self.x0.shape}, expected ({plant.n},)")
        if warmup is None:
            warmup = np.zeros((config.order, config.m))
        warmup = np.atleast_2d(np.asarray(warmup, dtype=float))
        if warmup.shape[0] < config.order or warmup.shape[1] != config.m:
            raise ValueError(
                f"warmup must supply at least {config.order} inputs of"
                f" width {config.m}")
        self.warmup = _readonly(warmup)
        self.snapshot_times = tuple(sorted({int(s) for s in snapshot_times}))
        if self.snapshot_times and self.snapshot_times[0] < 0:
            raise ValueError("snapshot times must be nonnegative")
        self.settling_band = float(settling_band)
        # fail early: the schedule must fit the run
        self.schedule.segments(self.t_sim)


class StepRecord:
    """One closed-loop step as it gets serialized."""

    __slots__ = ("t", "u_applied", "y_measured", "u_s", "y_s",
                 "cost_regularized", "cost_unregularized",
                 "solver_iterations", "status", "predicted_u", "predicted_y")

    def __init__(self, t, u_applied, y_measured, u_s, y_s, cost_regularized,
                 cost_unregularized, solver_iterations, status,
                 predicted_u=None, predicted_y=None):
        self.t = int(t)
        self.u_applied = _readonly(u_applied)
        self.y_measured = _readonly(y_measured)
        self.u_s = _readonly(u_s)
        self.y_s = _readonly(y_s)
        self.cost_regularized = float(cost_regularized)
        self.cost_unregularized = float(cost_unregularized)
        self.solver_iterations = int(solver_iterations)
        self.status = str(status)
        self.predicted_u = None if predicted_u is None else _readonly(predicted_u)
        self.predicted_y = None if predicted_y is None else _readonly(predicted_y)


class SegmentReference:
    """A schedule segment together with its optimal reachable equilibrium."""

    def __init__(self, start, end, target, equilibrium):
        self.start = int(start)
        self.end = int(end)
        self.target = target
        self.equilibrium = equilibrium

    @property
    def u_ref(self):
        return self.equilibrium.u_s

    @property
    def y_ref(self):
        return self.equilibrium.y_s


class ClosedLoopLog:
    """Per-step records plus the derived series the analysis needs.

    ``aborted_at`` is None for a completed run; on an infeasible step it
    holds the failing time index and the records stop just before it.
    """

    def __init__(self, records, references, data, aborted_at=None,
                 abort_reason=None):
        self.records = list(records)
        self.references = list(references)
        self.data = data
        self.aborted_at = aborted_at
        self.abort_reason = abort_reason

    def __len__(self):
        return len(self.records)

    @property
    def completed(self):
        return self.aborted_at is None

    @property
    def t(self):
        return np.array([r.t for r in self.records], dtype=int)

    @property
    def u(self):
        return np.array([r.u_applied for r in self.records])

    @property
    def y(self):
        return np.array([r.y_measured for r in self.records])

    @property
    def u_s(self):
        return np.array([r.u_s for r in self.records])

    @property
    def y_s(self):
        return np.array([r.y_s for r in self.records])

    @property
    def costs(self):
        return np.array([r.cost_regularized for r in self.records])

    @property
    def costs_unregularized(self):
        return np.array([r.cost_unregularized for r in self.records])

    def reference_at(self, t):
        for ref in self.references:
            if ref.start <= t < ref.end:
                return ref
        raise ValueError(f"no schedule segment covers t = {t}")

    def _per_step_reference(self, attr):
        return np.array([getattr(self.reference_at(r.t), attr)
                         for r in self.records])

    @property
    def tracking_error(self):
        """Per-step ``||y_t - y_ref||_2`` against the active segment."""
        if not self.records:
            return np.zeros(0)
        return np.linalg.norm(self.y - self._per_step_reference("y_ref"),
                              axis=1)

    @property
    def equilibrium_distance(self):
        """Per-step ``||y_s(t) - y_ref||_2``: the planner closing in."""
        if not self.records:
            return np.zeros(0)
        return np.linalg.norm(self.y_s - self._per_step_reference("y_ref"),
                              axis=1)

    def constraint_margins(self, input_box, output_box):
        """Smallest slack to each box per step; negative means violated."""
        u, y = self.u, self.y
        margins_u = np.minimum(
            np.min(u - input_box.lower, axis=1),
            np.min(input_box.upper - u, axis=1))
        margins_y = np.minimum(
            np.min(y - output_box.lower, axis=1),
            np.min(output_box.upper - y, axis=1))
        return margins_u, margins_y


class DecayFit:
    """Log-linear fit of an error transient."""

    def __init__(self, rate, r_squared, fit_length, degenerate):
        self.rate = float(rate)
        self.r_squared = float(r_squared)
        self.fit_length = int(fit_length)
        self.degenerate = bool(degenerate)


def fit_decay(series, window, tol=1e-8, floor_factor=100.0):
    """Fit ``error ~ C * rate**t`` over the transient part of a series.

    The fitted segment runs from the start until the error first drops
    below ``floor_factor * tol`` (where solver noise takes over) and is
    capped at ``window`` points. The series must extend to at least twice
    the window so the fit never swallows the whole run.

    Returns:
        DecayFit with the rate, the R-squared of the log-space line, the
        number of fitted points, and a degeneracy flag (set when the series
        starts at or below the noise floor).
    """
    s = np.ravel(np.asarray(series, dtype=float))
    window = int(window)
    if window < 2:
        raise ValueError("window must be at least 2")
    if s.size < 2 * window:
        raise ValueError(
            f"series has {s.size} points, need at least {2 * window}")
    if np.any(s < 0):
        raise ValueError("series must be nonnegative")
    floor = floor_factor * tol
    below = np.nonzero(s < floor)[0]
    end = int(below[0]) if below.size else s.size
    end = min(end, window)
    if end < 2:
        return DecayFit(rate=1.0, r_squared=0.0, fit_length=end,
                        degenerate=True)
    t = np.arange(end, dtype=float)
    ln = np.log(s[:end])
    slope, intercept = np.polyfit(t, ln, 1)
    resid = ln - (slope * t + intercept)
    total = ln - np.mean(ln)
    ss_tot = float(total @ total)
    # a flat series is fit perfectly by a flat line
    r2 = 1.0 if ss_tot < 1e-30 else 1.0 - float(resid @ resid) / ss_tot
    return DecayFit(rate=np.exp(slope), r_squared=r2, fit_length=end,
                    degenerate=False)


class RunMetrics:
    """Condensed evidence from one run.

    ``settling_time`` is the first step of the final schedule segment from
    which the tracking error stays inside the band; it equals ``t_sim``
    when the run never settles. ``cost_decrease`` holds the n-step
    telescoped differences ``J(t+n) - J(t)`` and ``stage_costs`` the
    per-step distance of the applied pair to the planned equilibrium,
    weighted by R and Q.
    """

    def __init__(self, final_error, settling_time, max_input_violation,
                 max_output_violation, cost_decrease, stage_costs,
                 state_error, decay, per_segment):
        self.final_error = float(final_error)
        self.settling_time = int(settling_time)
        self.max_input_violation = float(max_input_violation)
        self.max_output_violation = float(max_output_violation)
        self.cost_decrease = _readonly(cost_decrease)
        self.stage_costs = _readonly(stage_costs)
        self.state_error = _readonly(state_error)
        self.decay = decay
        self.per_segment = list(per_segment)


def _settled_at(errors, start, end, band):
    """First index in [start, end) from which errors stay within band."""
    segment = errors[start:end]
    inside = segment <= band
    settled = end
    for i in range(len(segment) - 1, -1, -1):
        if not inside[i]:
            break
        settled = start + i
    return settled


def run(exp):
    """Execute one closed-loop experiment.

    Returns:
        ``(ClosedLoopLog, RunMetrics)``. An infeasible step aborts the run;
        the partial log then carries ``aborted_at`` and the metrics cover
        the completed prefix.
    """
    sys = exp.plant
    cfg = exp.config
    u_d = generate_pe_input(cfg.m, exp.data_length, bounds=exp.data_bounds,
                            seed=exp.data_seed)
    data = DataTrajectory.from_trajectory(
        plant_mod.simulate(sys, np.zeros(sys.n), u_d))
    controller = Controller(data, cfg)

    references = []
    for start, end, target in exp.schedule.segments(exp.t_sim):
        eq = optimal_reachable_equilibrium(
            data, target, cfg.eq_input_box, cfg.eq_output_box, cfg.order,
            s_weight=cfg.s_mat, t_weight=cfg.t_mat)
        references.append(SegmentReference(start, end, target, eq))

    # warmup: drive the plant open loop to obtain the first n measurements
    x = exp.x0.copy()
    warm_u, warm_y = [], []
    for u_w in exp.warmup:
        x, y_w = plant_mod.step(sys, x, u_w)
        warm_u.append(u_w)
        warm_y.append(y_w)
    history = History(np.array(warm_u[-cfg.order:]),
                      np.array(warm_y[-cfg.order:]))

    records = []
    states = []
    aborted_at = None
    abort_reason = None
    snapshot = set(exp.snapshot_times)
    segment_iter = iter(references)
    active = next(segment_iter)
    controller.set_target(active.target)
    for t in range(exp.t_sim):
        if t >= active.end:
            active = next(segment_iter)
            controller.set_target(active.target)
        try:
            u_t, sol = controller.solve_step(history)
        except ControllerError as err:
            aborted_at = t
            abort_reason = str(err)
            break
        # the applied input is forced onto U; the projection is at most the
        # solver residual wide, and the log must satisfy the constraint
        # exactly
        u_t = cfg.input_box.clip(u_t)
        states.append(x.copy())
        x_next, y_t = plant_mod.step(sys, x, u_t)
        records.append(StepRecord(
            t=t, u_applied=u_t, y_measured=y_t, u_s=sol.u_s, y_s=sol.y_s,
            cost_regularized=sol.cost, cost_unregularized=sol.cost_tracking,
            solver_iterations=sol.iterations, status=sol.status,
            predicted_u=sol.predicted_u if t in snapshot else None,
            predicted_y=sol.predicted_y if t in snapshot else None))
        history = history.push(u_t, y_t)
        x = x_next

    log = ClosedLoopLog(records, references, data, aborted_at=aborted_at,
                        abort_reason=abort_reason)
    return log, _metrics(exp, log, np.array(states))


def _metrics(exp, log, states):
    cfg = exp.config
    n = cfg.order
    if not log.records:
        empty = np.zeros(0)
        decay = DecayFit(rate=1.0, r_squared=0.0, fit_length=0,
                         degenerate=True)
        return RunMetrics(np.inf, exp.t_sim, 0.0, 0.0, empty, empty, empty,
                          decay, [])

    u, y = log.u, log.y
    viol_u = max(cfg.input_box.violation(row) for row in u)
    viol_y = max(cfg.output_box.violation(row) for row in y)

    err_inf = np.array([
        np.max(np.abs(r.y_measured - log.reference_at(r.t).y_ref))
        for r in log.records])
    final_error = err_inf[-1]

    costs = log.costs_unregularized
    if len(costs) > n:
        cost_decrease = costs[n:] - costs[:-n]
    else:
        cost_decrease = np.zeros(0)
    du = u - log.u_s
    dy = y - log.y_s
    stage_costs = (np.einsum("ti,ij,tj->t", du, cfg.r_mat, du)
                   + np.einsum("ti,ij,tj->t", dy, cfg.q_mat, dy))

    per_segment = []
    settling = exp.t_sim
    for ref in log.references:
        end = min(ref.end, len(err_inf))
        if ref.start >= end:
            continue
        settled = _settled_at(err_inf, ref.start, end, exp.settling_band)
        per_segment.append({
            "start": ref.start,
            "end": end,
            "u_ref": np.asarray(ref.u_ref).tolist(),
            "y_ref": np.asarray(ref.y_ref).tolist(),
            "final_error": float(err_inf[end - 1]),
            "settled_at": int(settled),
        })
        settling = settled

    # oracle side: the plant state against the steady state of the first
    # segment's reference input (later segments start mid-flight)
    first = log.references[0]
    x_ref = plant_mod.steady_state_from_input(exp.plant, first.u_ref).x_s
    seg_end = min(first.end, len(states))
    state_error = np.linalg.norm(states[:seg_end] - x_ref, axis=1)
    window = max(2, seg_end // 2)
    if seg_end >= 2 * window:
        decay = fit_decay(state_error, window)
    else:
        decay = DecayFit(rate=1.0, r_squared=0.0, fit_length=0,
                         degenerate=True)

    return RunMetrics(
        final_error=final_error, settling_time=settling,
        max_input_violation=viol_u, max_output_violation=viol_y,
        cost_decrease=cost_decrease, stage_costs=stage_costs,
        state_error=state_error, decay=decay, per_segment=per_segment)


class Theorem2Report:
    """Pass/fail breakdown of the closed-loop guarantees."""

    def __init__(self, items):
        self.items = list(items)

    @property
    def all_pass(self):
        return all(ok for _, ok, _ in self.items)

    def __str__(self):
        lines = []
        for name, ok, detail in self.items:
            mark = "pass" if ok else "FAIL"
            lines.append(f"{name}: {mark} ({detail})")
        return "\n".join(lines)


def verify_theorem2(log, metrics, input_tol=0.0, output_tol=1e-8,
                    band=0.02, cost_tol=1e-6):
    """Check the three closed-loop guarantees on a finished run.

    (a) every step solved to optimality, (b) constraints hold (applied
    inputs exactly, measured outputs up to ``output_tol``), (c) the state
    error decays geometrically and the final tracking error sits inside
    the band. When the log was produced without coefficient
    regularization, the per-step cost-decrease inequality is checked too.

    Returns:
        Theorem2Report; items are ``(name, passed, detail)`` triples.
    """
    items = []

    if log.aborted_at is not None:
        items.append(("feasibility", False,
                      f"aborted at step {log.aborted_at}: {log.abort_reason}"))
    else:
        bad = [r.t for r in log.records if r.status != "optimal"]
        if bad:
            items.append(("feasibility", False,
                          f"step {bad[0]} finished {log.records[bad[0]].status}"))
        else:
            items.append(("feasibility", True,
                          f"{len(log.records)} steps optimal"))

    ok_u = metrics.max_input_violation <= input_tol
    ok_y = metrics.max_output_violation <= output_tol
    items.append((
        "constraints", ok_u and ok_y,
        f"max input violation {metrics.max_input_violation:.2e},"
        f" max output violation {metrics.max_output_violation:.2e}"))

    decay_ok = (not metrics.decay.degenerate) and metrics.decay.rate < 1.0
    final_ok = metrics.final_error <= band
    items.append((
        "stability", decay_ok and final_ok,
        f"decay rate {metrics.decay.rate:.4f}"
        f" (R^2 {metrics.decay.r_squared:.3f}),"
        f" final error {metrics.final_error:.2e}"))

    costs_r = log.costs
    costs_u = log.costs_unregularized
    if len(costs_u) > 1 and np.array_equal(costs_r, costs_u):
        diffs = costs_u[1:] - (costs_u[:-1] - metrics.stage_costs[:-1])
        worst = float(np.max(diffs))
        items.append(("cost decrease", worst <= cost_tol,
                      f"max J(t+1) - J(t) + stage(t) = {worst:.2e}"))

    return Theorem2Report(items)


def run_sweep(experiments):
    """Run independent experiments concurrently.

    Args:
        experiments: Mapping of key -> Experiment.

    Returns:
        Dict keyed like the input, values ``(log, metrics)``, assembled in
        sorted-key order regardless of completion order.
    """
    keys = sorted(experiments)
    with concurrent.futures.ThreadPoolExecutor(
            max_workers=min(4, max(1, len(keys)))) as pool:
        futures = {key: pool.submit(run, experiments[key]) for key in keys}
        return {key: futures[key].result() for key in keys}
