"""Equilibrium characterization and optimal reachable setpoints.

An input-output pair (u_s, y_s) is an equilibrium of the data-generating
system exactly when the constant window that repeats it n + 1 times is a
system trajectory, so equilibria can be certified from data alone through
the Hankel span test. On top of that test sits a small QP that projects an
arbitrary (possibly unreachable) target onto the set of constrained
equilibria: the tracking controller steers toward that projection, never
toward the raw target.
"""

import numpy as np

from . import qp
from .hankel import hankel, is_persistently_exciting, trajectory_membership, PersistenceError
from .sets import BoxSet


def weight_matrix(weight, dim, name="weight"):
    """Coerce a scalar or matrix weight to a (dim, dim) PSD array."""
    arr = np.asarray(weight, dtype=float)
    if arr.ndim == 0:
        if arr < 0:
            raise ValueError(f"{name} must be nonnegative, got {float(arr)}")
        return float(arr) * np.eye(dim)
    arr = np.atleast_2d(arr)
    if arr.shape != (dim, dim):
        raise ValueError(f"{name} has shape {arr.shape}, expected ({dim}, {dim})")
    if np.max(np.abs(arr - arr.T)) > 1e-12 * max(1.0, np.max(np.abs(arr))):
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(0.5 * (arr + arr.T))) < -1e-10:
        raise ValueError(f"{name} must be positive semidefinite")
    return 0.5 * (arr + arr.T)


class TargetSetpoint:
    """Tracking target: an output target y and an optional input target u."""

    def __init__(self, y, u=None):
        self.y = np.ravel(np.asarray(y, dtype=float)).copy()
        self.u = None if u is None else np.ravel(np.asarray(u, dtype=float)).copy()
        self.y.setflags(write=False)
        if self.u is not None:
            self.u.setflags(write=False)

    def input_or_zero(self, m):
        if self.u is None:
            return np.zeros(m)
        if self.u.shape != (m,):
            raise ValueError(f"input target has shape {self.u.shape}, expected ({m},)")
        return self.u

    def __repr__(self):
        u_part = "None" if self.u is None else self.u.tolist()
        return f"TargetSetpoint(y={self.y.tolist()}, u={u_part})"


class EquilibriumSolution:
    """Optimal reachable equilibrium and the QP evidence behind it."""

    def __init__(self, u_s, y_s, alpha, cost, status, solver_solution):
        self.u_s = u_s
        self.y_s = y_s
        self.alpha = alpha
        self.cost = cost
        self.status = status
        self.solver_solution = solver_solution

    @property
    def optimal(self):
        return self.status == qp.OPTIMAL


def is_equilibrium_pair(data, u_s, y_s, order, tol=1e-6):
    """Certify an equilibrium pair from data.

    Builds the constant window of length order + 1 and runs the Hankel span
    test, which needs the data to be persistently exciting of order
    2 * order + 1.

    Returns:
        MembershipResult; truthy when (u_s, y_s) is an equilibrium of the
        data-generating system.
    """
    u_s = np.ravel(np.asarray(u_s, dtype=float))
    y_s = np.ravel(np.asarray(y_s, dtype=float))
    window = (np.tile(u_s, (int(order) + 1, 1)), np.tile(y_s, (int(order) + 1, 1)))
    return trajectory_membership(data, window, order, tol=tol)


def _require_excitation(data, order):
    report = is_persistently_exciting(data.u, order)
    if not report:
        raise PersistenceError(
            f"data is not persistently exciting of order {order}"
            f" ({report.detail})", report)


def optimal_reachable_equilibrium(data, target, input_box, output_box, order,
                                  s_weight=0.0, t_weight=1.0, settings=None):
    """Project a target onto the constrained reachable equilibria.

    Solves, over the coefficient vector and the pair (u_s, y_s),

        minimize  |u_s - u_t|_S^2 + |y_s - y_t|_T^2
        s.t.      the constant (order + 1)-window of (u_s, y_s) lies in the
                  Hankel span of the data, u_s and y_s inside their boxes.

    When the target is itself a constrained equilibrium the cost is zero and
    the target is returned; otherwise the closest constrained equilibrium in
    the weighted norm is found.

    Args:
        data: Recorded DataTrajectory, persistently exciting of order
            2 * order + 1.
        target: TargetSetpoint.
        input_box, output_box: BoxSet constraints on u_s and y_s.
        order: Upper bound on the system order n.
        s_weight, t_weight: Scalars or PSD matrices weighting the input and
            output deviation from the target.
        settings: Optional QpSettings override.

    Raises:
        PersistenceError: If the excitation precondition fails.
    """
    order = int(order)
    m, p = data.m, data.p
    if input_box.dim != m or output_box.dim != p:
        raise ValueError("box dimensions do not match the data channels")
    _require_excitation(data, 2 * order + 1)
    s_mat = weight_matrix(s_weight, m, "s_weight")
    t_mat = weight_matrix(t_weight, p, "t_weight")
    u_t = target.input_or_zero(m)
    y_t = np.ravel(target.y)
    if y_t.shape != (p,):
        raise ValueError(f"output target has shape {y_t.shape}, expected ({p},)")

    depth = order + 1
    h_u = hankel(data.u, depth).matrix
    h_y = hankel(data.y, depth).matrix
    n_alpha = h_u.shape[1]
    n_var = n_alpha + m + p
    sl_alpha = slice(0, n_alpha)
    sl_u = slice(n_alpha, n_alpha + m)
    sl_y = slice(n_alpha + m, n_var)

    # rows: H_u alpha - 1 (x) u_s = 0, then H_y alpha - 1 (x) y_s = 0
    a_mat = np.zeros((depth * (m + p), n_var))
    a_mat[: depth * m, sl_alpha] = h_u
    a_mat[: depth * m, sl_u] = -np.tile(np.eye(m), (depth, 1))
    a_mat[depth * m :, sl_alpha] = h_y
    a_mat[depth * m :, sl_y] = -np.tile(np.eye(p), (depth, 1))
    b_vec = np.zeros(depth * (m + p))

    p_mat = np.zeros((n_var, n_var))
    p_mat[sl_u, sl_u] = 2.0 * s_mat
    p_mat[sl_y, sl_y] = 2.0 * t_mat
    q_vec = np.zeros(n_var)
    q_vec[sl_u] = -2.0 * s_mat @ u_t
    q_vec[sl_y] = -2.0 * t_mat @ y_t
    offset = float(u_t @ s_mat @ u_t + y_t @ t_mat @ y_t)

    lower = np.full(n_var, -np.inf)
    upper = np.full(n_var, np.inf)
    lower[sl_u], upper[sl_u] = input_box.lower, input_box.upper
    lower[sl_y], upper[sl_y] = output_box.lower, output_box.upper

    prob = qp.QpProblem(
        p_mat, q_vec, A=a_mat, b=b_vec, lower=lower, upper=upper,
        var_slices={"alpha": sl_alpha, "u_s": sl_u, "y_s": sl_y},
        offset=offset,
    )
    sol = qp.solve_qp(prob, settings)
    return EquilibriumSolution(
        u_s=sol.z[sl_u], y_s=sol.z[sl_y], alpha=sol.z[sl_alpha],
        cost=sol.objective, status=sol.status, solver_solution=sol,
    )


def model_reachable_equilibrium(sys, target, input_box, output_box,
                                s_weight=0.0, t_weight=1.0, settings=None):
    """Model-based counterpart of optimal_reachable_equilibrium.

    Solves the same projection over (u_s, x_s, y_s) with the state-space
    equations as equality constraints. Used to cross-check the data-driven
    answer; the two agree on noise-free data from the same system.
    """
    m, p, n = sys.m, sys.p, sys.n
    if input_box.dim != m or output_box.dim != p:
        raise ValueError("box dimensions do not match the system channels")
    s_mat = weight_matrix(s_weight, m, "s_weight")
    t_mat = weight_matrix(t_weight, p, "t_weight")
    u_t = target.input_or_zero(m)
    y_t = np.ravel(target.y)

    n_var = m + n + p
    sl_u = slice(0, m)
    sl_x = slice(m, m + n)
    sl_y = slice(m + n, n_var)
    a_mat = np.zeros((n + p, n_var))
    a_mat[:n, sl_x] = np.eye(n) - sys.A
    a_mat[:n, sl_u] = -sys.B
    a_mat[n:, sl_y] = np.eye(p)
    a_mat[n:, sl_x] = -sys.C
    a_mat[n:, sl_u] = -sys.D
    b_vec = np.zeros(n + p)

    p_mat = np.zeros((n_var, n_var))
    p_mat[sl_u, sl_u] = 2.0 * s_mat
    p_mat[sl_y, sl_y] = 2.0 * t_mat
    q_vec = np.zeros(n_var)
    q_vec[sl_u] = -2.0 * s_mat @ u_t
    q_vec[sl_y] = -2.0 * t_mat @ y_t
    offset = float(u_t @ s_mat @ u_t + y_t @ t_mat @ y_t)
    lower = np.full(n_var, -np.inf)
    upper = np.full(n_var, np.inf)
    lower[sl_u], upper[sl_u] = input_box.lower, input_box.upper
    lower[sl_y], upper[sl_y] = output_box.lower, output_box.upper

    prob = qp.QpProblem(
        p_mat, q_vec, A=a_mat, b=b_vec, lower=lower, upper=upper,
        var_slices={"u_s": sl_u, "x_s": sl_x, "y_s": sl_y}, offset=offset,
    )
    sol = qp.solve_qp(prob, settings)
    return EquilibriumSolution(
        u_s=sol.z[sl_u], y_s=sol.z[sl_y], alpha=None,
        cost=sol.objective, status=sol.status, solver_solution=sol,
    )
