"""Receding-horizon tracking controller built on Hankel data.

The controller solves, at every step, a QP whose trajectory variables are
constrained to the span of the data Hankel matrices instead of a state-space
model. The decision variables are the span coefficients, a predicted
input-output window, and an artificial equilibrium (u_s, y_s): the window
must start from the measured n-step history, end at the artificial
equilibrium for n + 1 steps, and stay inside the operating boxes, while the
cost pulls the window toward the artificial equilibrium and the equilibrium
toward the (possibly unreachable) target. Tracking the best reachable
equilibrium instead of the raw target is what keeps every iteration feasible
when the target moves or cannot be met.
"""

import numpy as np

from . import qp
from .equilibria import TargetSetpoint, weight_matrix
from .hankel import hankel, is_persistently_exciting, PersistenceError
from .plant import _readonly
from .sets import BoxSet


class ControllerError(RuntimeError):
    """Raised when a step's QP does not come back optimal.

    Attributes:
        status: Solver status string.
        solution: The failed QpSolution, when one exists.
    """

    def __init__(self, message, status, solution=None):
        super().__init__(message)
        self.status = status
        self.solution = solution


class History:
    """The last n input-output pairs, newest last."""

    def __init__(self, u, y):
        self.u = _readonly(np.atleast_2d(np.asarray(u, dtype=float)))
        self.y = _readonly(np.atleast_2d(np.asarray(y, dtype=float)))
        if self.u.shape[0] != self.y.shape[0]:
            raise ValueError("history input and output lengths differ")
        if self.u.shape[0] < 1:
            raise ValueError("history must cover at least one step")

    @classmethod
    def zeros(cls, order, m, p):
        """All-zero history, the natural start for a plant at rest."""
        return cls(np.zeros((order, m)), np.zeros((order, p)))

    @property
    def order(self):
        return self.u.shape[0]

    def push(self, u_t, y_t):
        """Drop the oldest pair and append the newest."""
        u_t = np.ravel(np.asarray(u_t, dtype=float))
        y_t = np.ravel(np.asarray(y_t, dtype=float))
        return History(np.vstack([self.u[1:], u_t]),
                       np.vstack([self.y[1:], y_t]))


def _definite(mat, name):
    if np.min(np.linalg.eigvalsh(mat)) <= 0:
        raise ValueError(f"{name} must be positive definite")
    return mat


class MpcConfig:
    """Controller parameters.

    Args:
        horizon: Prediction length L; must satisfy L >= 2 * order.
        order: Upper bound n on the order of the data-generating system.
        q_weight, r_weight: Output and input stage weights, positive
            definite (scalars mean scaled identity).
        input_box, output_box: Operating constraints U and Y.
        s_weight, t_weight: Target-offset weights on u_s and y_s; S may be
            zero, T must be positive definite.
        eq_input_box, eq_output_box: Constraint sets for the artificial
            equilibrium; default to the operating boxes scaled by
            ``shrink_factor`` so the equilibrium stays strictly inside.
        shrink_factor: Scale in (0, 1] used for the default equilibrium
            boxes.
        alpha_reg: Nonnegative penalty on the squared norm of the span
            coefficients.
        solver_settings: Optional QpSettings override.
    """

    def __init__(self, horizon, order, q_weight, r_weight, input_box,
                 output_box, s_weight=0.0, t_weight=1.0, eq_input_box=None,
                 eq_output_box=None, shrink_factor=0.99, alpha_reg=1e-4,
                 solver_settings=None):
        self.horizon = int(horizon)
        self.order = int(order)
        if self.order < 1:
            raise ValueError(f"order must be at least 1, got {order}")
        if self.horizon < 2 * self.order:
            raise ValueError(
                f"horizon must satisfy L ≥ 2n, got L={self.horizon} with "
                f"n={self.order}")
        if not isinstance(input_box, BoxSet) or not isinstance(output_box, BoxSet):
            raise TypeError("input_box and output_box must be BoxSet instances")
        self.input_box = input_box
        self.output_box = output_box
        m, p = input_box.dim, output_box.dim
        self.q_mat = _definite(weight_matrix(q_weight, p, "q_weight"), "q_weight")
        self.r_mat = _definite(weight_matrix(r_weight, m, "r_weight"), "r_weight")
        self.t_mat = _definite(weight_matrix(t_weight, p, "t_weight"), "t_weight")
        self.s_mat = weight_matrix(s_weight, m, "s_weight")
        if not 0.0 < shrink_factor <= 1.0:
            raise ValueError(f"shrink_factor must be in (0, 1], got {shrink_factor}")
        self.shrink_factor = float(shrink_factor)
        self.eq_input_box = eq_input_box or input_box.scale(self.shrink_factor)
        self.eq_output_box = eq_output_box or output_box.scale(self.shrink_factor)
        if not input_box.contains_box(self.eq_input_box, tol=1e-12):
            raise ValueError("equilibrium input box must lie inside the input box")
        if not output_box.contains_box(self.eq_output_box, tol=1e-12):
            raise ValueError("equilibrium output box must lie inside the output box")
        if self.eq_input_box.dim != m or self.eq_output_box.dim != p:
            raise ValueError("equilibrium box dimensions do not match")
        if alpha_reg < 0:
            raise ValueError(f"alpha_reg must be nonnegative, got {alpha_reg}")
        self.alpha_reg = float(alpha_reg)
        self.solver_settings = solver_settings or qp.QpSettings()

    @property
    def m(self):
        return self.input_box.dim

    @property
    def p(self):
        return self.output_box.dim


class MpcSolution:
    """One optimized step: the full window, the artificial equilibrium, and
    the solver evidence.

    ``u_window``/``y_window`` cover the n history steps followed by the
    L + 1 predicted steps; ``predicted_u``/``predicted_y`` are the forward
    part only. ``cost`` is the full objective including the coefficient
    penalty, ``cost_tracking`` the same value with that penalty removed.
    """

    def __init__(self, u_window, y_window, u_s, y_s, alpha, cost,
                 cost_tracking, status, iterations, primal_residual,
                 dual_residual, solver_solution, order):
        self.u_window = _readonly(u_window)
        self.y_window = _readonly(y_window)
        self.u_s = _readonly(u_s)
        self.y_s = _readonly(y_s)
        self.alpha = _readonly(alpha)
        self.cost = float(cost)
        self.cost_tracking = float(cost_tracking)
        self.status = status
        self.iterations = int(iterations)
        self.primal_residual = float(primal_residual)
        self.dual_residual = float(dual_residual)
        self.solver_solution = solver_solution
        self._order = int(order)

    @property
    def predicted_u(self):
        return self.u_window[self._order:]

    @property
    def predicted_y(self):
        return self.y_window[self._order:]


class Controller:
    """Receding-horizon controller bound to one data trajectory.

    Construction validates everything the scheme relies on: the horizon
    bound L >= 2n, weight definiteness, box nesting, and persistency of
    excitation of order L + 2n + 1 (which bounds the minimum data length).
    After the first solve the QP factorization is reused and every
    subsequent step is warm started from the shifted previous window.
    """

    def __init__(self, data, config):
        if data.m != config.m:
            raise ValueError(
                f"data has {data.m} input channels, boxes have {config.m}")
        if data.p != config.p:
            raise ValueError(
                f"data has {data.p} output channels, boxes have {config.p}")
        report = is_persistently_exciting(
            data.u, config.horizon + 2 * config.order + 1)
        if not report:
            raise PersistenceError(
                "data is not persistently exciting of order "
                f"{config.horizon + 2 * config.order + 1} ({report.detail})",
                report)
        self.data = data
        self.config = config
        self.excitation_report = report
        depth = config.horizon + config.order + 1
        self._h_u = hankel(data.u, depth).matrix
        self._h_y = hankel(data.y, depth).matrix
        self._stacked = np.vstack([self._h_u, self._h_y])
        self._n_alpha = self._h_u.shape[1]
        self._layout()
        self._problem = self._build_static_problem()
        self._workspace = None
        self._target = None
        self._prev = None

    def _layout(self):
        cfg = self.config
        m, p, L = cfg.m, cfg.p, cfg.horizon
        n_pred = L + 1
        start = self._n_alpha
        self.sl_alpha = slice(0, start)
        self.sl_u = slice(start, start + n_pred * m)
        start += n_pred * m
        self.sl_y = slice(start, start + n_pred * p)
        start += n_pred * p
        self.sl_us = slice(start, start + m)
        start += m
        self.sl_ys = slice(start, start + p)
        self.n_var = start + p

    def _build_static_problem(self):
        cfg = self.config
        m, p, L, n = cfg.m, cfg.p, cfg.horizon, cfg.order
        n_pred = L + 1
        n_var = self.n_var
        k_alpha = self._n_alpha

        rows_hist = n * (m + p)
        rows_link = n_pred * (m + p)
        rows_term = (n + 1) * (m + p)
        a_mat = np.zeros((rows_hist + rows_link + rows_term, n_var))
        row = 0
        # the first n window steps must reproduce the measured history
        a_mat[row:row + n * m, self.sl_alpha] = self._h_u[: n * m]
        row += n * m
        a_mat[row:row + n * p, self.sl_alpha] = self._h_y[: n * p]
        row += n * p
        # the remaining steps define the predicted window
        a_mat[row:row + n_pred * m, self.sl_alpha] = self._h_u[n * m:]
        a_mat[row:row + n_pred * m, self.sl_u] = -np.eye(n_pred * m)
        row += n_pred * m
        a_mat[row:row + n_pred * p, self.sl_alpha] = self._h_y[n * p:]
        a_mat[row:row + n_pred * p, self.sl_y] = -np.eye(n_pred * p)
        row += n_pred * p
        # the window parks on the artificial equilibrium for n + 1 steps
        for j, k in enumerate(range(L - n, L + 1)):
            r0 = row + j * m
            a_mat[r0:r0 + m, self.sl_u.start + k * m:
                  self.sl_u.start + (k + 1) * m] = np.eye(m)
            a_mat[r0:r0 + m, self.sl_us] = -np.eye(m)
        row += (n + 1) * m
        for j, k in enumerate(range(L - n, L + 1)):
            r0 = row + j * p
            a_mat[r0:r0 + p, self.sl_y.start + k * p:
                  self.sl_y.start + (k + 1) * p] = np.eye(p)
            a_mat[r0:r0 + p, self.sl_ys] = -np.eye(p)
        row += (n + 1) * p
        self._rows_hist = rows_hist

        p_mat = np.zeros((n_var, n_var))
        p_mat[self.sl_alpha, self.sl_alpha] = 2.0 * cfg.alpha_reg * np.eye(k_alpha)
        for k in range(n_pred):
            sl = slice(self.sl_u.start + k * m, self.sl_u.start + (k + 1) * m)
            p_mat[sl, sl] = 2.0 * cfg.r_mat
            p_mat[sl, self.sl_us] = -2.0 * cfg.r_mat
            p_mat[self.sl_us, sl] = -2.0 * cfg.r_mat
        for k in range(n_pred):
            sl = slice(self.sl_y.start + k * p, self.sl_y.start + (k + 1) * p)
            p_mat[sl, sl] = 2.0 * cfg.q_mat
            p_mat[sl, self.sl_ys] = -2.0 * cfg.q_mat
            p_mat[self.sl_ys, sl] = -2.0 * cfg.q_mat
        p_mat[self.sl_us, self.sl_us] = 2.0 * (n_pred * cfg.r_mat + cfg.s_mat)
        p_mat[self.sl_ys, self.sl_ys] = 2.0 * (n_pred * cfg.q_mat + cfg.t_mat)

        lower = np.full(n_var, -np.inf)
        upper = np.full(n_var, np.inf)
        lower[self.sl_u] = np.tile(cfg.input_box.lower, n_pred)
        upper[self.sl_u] = np.tile(cfg.input_box.upper, n_pred)
        lower[self.sl_y] = np.tile(cfg.output_box.lower, n_pred)
        upper[self.sl_y] = np.tile(cfg.output_box.upper, n_pred)
        lower[self.sl_us] = cfg.eq_input_box.lower
        upper[self.sl_us] = cfg.eq_input_box.upper
        lower[self.sl_ys] = cfg.eq_output_box.lower
        upper[self.sl_ys] = cfg.eq_output_box.upper

        return qp.QpProblem(
            p_mat, np.zeros(n_var), A=a_mat, b=np.zeros(a_mat.shape[0]),
            lower=lower, upper=upper,
            var_slices={"alpha": self.sl_alpha, "u_pred": self.sl_u,
                        "y_pred": self.sl_y, "u_s": self.sl_us,
                        "y_s": self.sl_ys},
        )

    def _target_cost(self, target):
        cfg = self.config
        u_t = target.input_or_zero(cfg.m)
        y_t = np.ravel(target.y)
        if y_t.shape != (cfg.p,):
            raise ValueError(
                f"target output has shape {y_t.shape}, expected ({cfg.p},)")
        q_vec = np.zeros(self.n_var)
        q_vec[self.sl_us] = -2.0 * cfg.s_mat @ u_t
        q_vec[self.sl_ys] = -2.0 * cfg.t_mat @ y_t
        offset = float(u_t @ cfg.s_mat @ u_t + y_t @ cfg.t_mat @ y_t)
        return q_vec, offset

    def _history_rhs(self, history):
        cfg = self.config
        if history.order != cfg.order:
            raise ValueError(
                f"history covers {history.order} steps, expected {cfg.order}")
        if history.u.shape[1] != cfg.m or history.y.shape[1] != cfg.p:
            raise ValueError("history channel counts do not match the config")
        b_vec = np.zeros(self._problem.n_eq)
        n, m = cfg.order, cfg.m
        b_vec[: n * m] = history.u.ravel()
        b_vec[n * m: self._rows_hist] = history.y.ravel()
        return b_vec

    def build_problem(self, history, target):
        """Assemble the full QP for one step as a standalone problem."""
        q_vec, offset = self._target_cost(target)
        b_vec = self._history_rhs(history)
        base = self._problem
        return qp.QpProblem(
            base.P, q_vec, A=base.A, b=b_vec, lower=base.lower,
            upper=base.upper, var_slices=dict(base.var_slices), offset=offset)

    def set_target(self, target):
        """Switch the tracking target; the QP structure is unchanged."""
        if not isinstance(target, TargetSetpoint):
            target = TargetSetpoint(target)
        self._target_cost(target)  # validate shape before committing
        self._target = target
        # the equilibration depends on q, so the workspace is rebuilt on
        # the next solve instead of patched in place
        self._workspace = None

    @property
    def target(self):
        return self._target

    def shift_candidate(self, previous, u_new, y_new):
        """Warm-start vector from the shift of a previous solution.

        Drops the oldest window step, appends the artificial equilibrium,
        substitutes the newest measured pair where the applied step sat, and
        refits the span coefficients by least squares. At an equilibrium the
        shift reproduces the previous solution.
        """
        cfg = self.config
        n = cfg.order
        cand_u = np.vstack([previous.u_window[1:], previous.u_s])
        cand_y = np.vstack([previous.y_window[1:], previous.y_s])
        cand_u[n - 1] = np.ravel(u_new)
        cand_y[n - 1] = np.ravel(y_new)
        stacked_target = np.concatenate([cand_u.ravel(), cand_y.ravel()])
        alpha, *_ = np.linalg.lstsq(self._stacked, stacked_target, rcond=None)
        z = np.empty(self.n_var)
        z[self.sl_alpha] = alpha
        z[self.sl_u] = cand_u[n:].ravel()
        z[self.sl_y] = cand_y[n:].ravel()
        z[self.sl_us] = previous.u_s
        z[self.sl_ys] = previous.y_s
        return z

    def solve_step(self, history, target=None):
        """Optimize one step and return the input to apply.

        Args:
            history: History holding the last n measured pairs.
            target: Optional new TargetSetpoint; omitted means keep the
                current one.

        Returns:
            Tuple ``(u0, MpcSolution)`` where u0 is the first predicted
            input.

        Raises:
            ControllerError: If the QP fails to come back optimal.
        """
        if target is not None:
            self.set_target(target)
        if self._target is None:
            raise ControllerError("no tracking target set", status="unset")
        b_vec = self._history_rhs(history)
        if self._workspace is None:
            self._workspace = qp.QpWorkspace(
                self.build_problem(history, self._target),
                self.config.solver_settings)
        warm = None
        if self._prev is not None:
            z0 = self.shift_candidate(self._prev, history.u[-1], history.y[-1])
            prev_state = self._prev.solver_solution.warm_start_state()
            warm = (z0, prev_state[1] if prev_state else None, None)
        sol = self._workspace.solve(b=b_vec, warm_start=warm)
        if sol.status != qp.OPTIMAL:
            self._prev = None
            raise ControllerError(
                f"step QP finished with status '{sol.status}'",
                status=sol.status, solution=sol)
        mpc_sol = self._wrap(sol, history)
        self._prev = mpc_sol
        return mpc_sol.predicted_u[0].copy(), mpc_sol

    def reset(self):
        """Forget the warm-start state (e.g. after a plant restart)."""
        self._prev = None

    def _wrap(self, sol, history):
        cfg = self.config
        m, p, L = cfg.m, cfg.p, cfg.horizon
        u_pred = sol.z[self.sl_u].reshape(L + 1, m)
        y_pred = sol.z[self.sl_y].reshape(L + 1, p)
        alpha = sol.z[self.sl_alpha]
        cost = sol.objective
        cost_tracking = cost - cfg.alpha_reg * float(alpha @ alpha)
        return MpcSolution(
            u_window=np.vstack([history.u, u_pred]),
            y_window=np.vstack([history.y, y_pred]),
            u_s=sol.z[self.sl_us], y_s=sol.z[self.sl_ys], alpha=alpha,
            cost=cost, cost_tracking=cost_tracking, status=sol.status,
            iterations=sol.iterations, primal_residual=sol.primal_residual,
            dual_residual=sol.dual_residual, solver_solution=sol,
            order=cfg.order)
