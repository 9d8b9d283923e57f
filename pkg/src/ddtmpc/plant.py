"""Discrete-time LTI plants and model-based steady-state calculations.

The controller in this package never looks at a state-space model. The
classes and functions here exist to generate input-output data, to act as
the simulated plant in closed loop, and to provide independent model-based
answers that the data-driven pipeline is checked against in tests.
"""

import numpy as np


class GenerationError(RuntimeError):
    """Raised when random system generation exhausts its attempt budget."""


class UnreachableOutputError(ValueError):
    """Raised when no steady-state input reproduces a requested output.

    Attributes:
        residual: Max-norm gap between the requested output and the closest
            achievable steady-state output.
    """

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = float(residual)


def numerical_rank(mat, rtol=None):
    """Rank of a matrix by singular value thresholding.

    A singular value counts toward the rank when it exceeds
    ``max(mat.shape) * sigma_max * rtol``. The default ``rtol`` of 1e-12 is
    deliberately tighter than the numpy default so that Hankel matrices of
    long trajectories are not spuriously reported rank-deficient.

    Args:
        mat: 2-D array.
        rtol: Optional relative threshold overriding the 1e-12 default.

    Returns:
        Tuple ``(rank, margin)`` where ``margin`` is the smallest singular
        value still counted (0.0 for the zero matrix).
    """
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.size == 0:
        return 0, 0.0
    svals = np.linalg.svd(mat, compute_uv=False)
    if rtol is None:
        rtol = 1e-12
    cut = max(mat.shape) * svals[0] * rtol
    kept = svals[svals > cut]
    if kept.size == 0:
        return 0, 0.0
    return int(kept.size), float(kept[-1])


def _readonly(arr):
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


def _as_samples(seq):
    """Coerce a sample sequence to shape (N, d); 1-D input means d = 1."""
    arr = np.asarray(seq, dtype=float)
    if arr.ndim == 0:
        raise ValueError("expected a sequence of samples, got a scalar")
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class SystemRealization:
    """A discrete-time state-space system x+ = Ax + Bu, y = Cx + Du.

    Instances are immutable: the matrices are copied and marked read-only at
    construction. Dimensions are exposed as ``n`` (states), ``m`` (inputs)
    and ``p`` (outputs).
    """

    def __init__(self, A, B, C, D=None):
        self.A = _readonly(np.atleast_2d(A))
        self.B = _readonly(np.atleast_2d(B))
        self.C = _readonly(np.atleast_2d(C))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise ValueError(f"B has {self.B.shape[0]} rows, expected {n}")
        if self.C.shape[1] != n:
            raise ValueError(f"C has {self.C.shape[1]} columns, expected {n}")
        m = self.B.shape[1]
        p = self.C.shape[0]
        if D is None:
            D = np.zeros((p, m))
        self.D = _readonly(np.atleast_2d(D))
        if self.D.shape != (p, m):
            raise ValueError(f"D must be {(p, m)}, got {self.D.shape}")
        self.n = n
        self.m = m
        self.p = p

    def __repr__(self):
        return f"SystemRealization(n={self.n}, m={self.m}, p={self.p})"


class Trajectory:
    """Paired input and output sequences of equal length.

    ``u`` has shape (N, m) and ``y`` shape (N, p). N may be zero for the
    empty trajectory produced by simulating an empty input sequence.
    """

    def __init__(self, u, y):
        self.u = _readonly(_as_samples(u))
        self.y = _readonly(_as_samples(y))
        if self.u.shape[0] != self.y.shape[0]:
            raise ValueError(
                f"input length {self.u.shape[0]} != output length {self.y.shape[0]}"
            )

    def __len__(self):
        return self.u.shape[0]


class SteadyState:
    """A steady state (x_s, u_s, y_s) of a given system."""

    def __init__(self, x_s, u_s, y_s):
        self.x_s = _readonly(np.ravel(x_s))
        self.u_s = _readonly(np.ravel(u_s))
        self.y_s = _readonly(np.ravel(y_s))

    def residuals(self, sys):
        """Max-norm defects of the two steady-state equations."""
        state = np.max(np.abs(sys.A @ self.x_s + sys.B @ self.u_s - self.x_s))
        output = np.max(np.abs(sys.C @ self.x_s + sys.D @ self.u_s - self.y_s))
        return float(state), float(output)


def step(sys, x, u):
    """One-step update. Returns ``(x_next, y)`` where y is measured at x."""
    x = np.ravel(np.asarray(x, dtype=float))
    u = np.ravel(np.asarray(u, dtype=float))
    if x.shape != (sys.n,):
        raise ValueError(f"state has shape {x.shape}, expected ({sys.n},)")
    if u.shape != (sys.m,):
        raise ValueError(f"input has shape {u.shape}, expected ({sys.m},)")
    return sys.A @ x + sys.B @ u, sys.C @ x + sys.D @ u


def simulate(sys, x0, inputs):
    """Roll the system forward under a given input sequence.

    Args:
        sys: System to simulate.
        x0: Initial state.
        inputs: Array-like of shape (N, m); an empty sequence is allowed and
            yields an empty trajectory.

    Returns:
        Trajectory of the same length as ``inputs``.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.size == 0:
        return Trajectory(np.zeros((0, sys.m)), np.zeros((0, sys.p)))
    inputs = np.atleast_2d(inputs)
    if inputs.shape[1] != sys.m:
        raise ValueError(f"inputs have width {inputs.shape[1]}, expected {sys.m}")
    x = np.ravel(np.asarray(x0, dtype=float))
    if x.shape != (sys.n,):
        raise ValueError(f"x0 has shape {x.shape}, expected ({sys.n},)")
    outputs = np.empty((inputs.shape[0], sys.p))
    for k, u in enumerate(inputs):
        # y_k is measured at the pre-update state
        outputs[k] = sys.C @ x + sys.D @ u
        x = sys.A @ x + sys.B @ u
    return Trajectory(inputs, outputs)


def assert_minimal(sys, rtol=None):
    """Raise ValueError unless (A, B) is controllable and (A, C) observable."""
    n = sys.n
    ctrb = np.hstack([np.linalg.matrix_power(sys.A, k) @ sys.B for k in range(n)])
    obsv = np.vstack([sys.C @ np.linalg.matrix_power(sys.A, k) for k in range(n)])
    rank_c, _ = numerical_rank(ctrb, rtol)
    rank_o, _ = numerical_rank(obsv, rtol)
    if rank_c < n:
        raise ValueError(f"system not controllable: rank {rank_c} < {n}")
    if rank_o < n:
        raise ValueError(f"system not observable: rank {rank_o} < {n}")


def four_tank():
    """The linearized four-tank process used throughout the test suite.

    Two pump inputs, two tank-level outputs, four states, no feedthrough.
    The open-loop system is stable (spectral radius below one) and minimal.
    """
    A = np.array(
        [
            [0.921, 0.0, 0.041, 0.0],
            [0.0, 0.918, 0.0, 0.033],
            [0.0, 0.0, 0.924, 0.0],
            [0.0, 0.0, 0.0, 0.937],
        ]
    )
    B = np.array(
        [
            [0.017, 0.001],
            [0.001, 0.023],
            [0.0, 0.061],
            [0.072, 0.0],
        ]
    )
    C = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    return SystemRealization(A, B, C)


def random_minimal(n, m, p, seed, spectral_radius=0.95, max_attempts=50):
    """Draw a random minimal stable system.

    Entries of A, B, C are uniform on [-1, 1] and A is rescaled to the
    requested spectral radius; D is zero. Redraws until the realization is
    minimal, which for generic draws succeeds immediately.

    Args:
        n, m, p: State, input and output dimensions.
        seed: Seed for the random generator; equal seeds give bitwise
            identical systems.
        spectral_radius: Spectral radius of the rescaled A.
        max_attempts: Redraw budget before giving up.

    Raises:
        GenerationError: If no minimal draw is found within the budget.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        A = rng.uniform(-1.0, 1.0, (n, n))
        radius = np.max(np.abs(np.linalg.eigvals(A)))
        if radius > 0:
            A = A * (spectral_radius / radius)
        B = rng.uniform(-1.0, 1.0, (n, m))
        C = rng.uniform(-1.0, 1.0, (p, n))
        sys = SystemRealization(A, B, C)
        try:
            assert_minimal(sys)
        except ValueError:
            continue
        return sys
    raise GenerationError(
        f"no minimal realization with n={n}, m={m}, p={p} in {max_attempts} draws"
    )


def _check_i_minus_a(sys):
    eye_minus_a = np.eye(sys.n) - sys.A
    svals = np.linalg.svd(eye_minus_a, compute_uv=False)
    if svals[-1] <= sys.n * svals[0] * 1e-12:
        raise np.linalg.LinAlgError(
            "I - A is singular: the system has an eigenvalue at 1, "
            "steady states are not unique"
        )
    return eye_minus_a


def steady_state_from_input(sys, u_s):
    """Steady state reached by holding the input ``u_s``.

    Solves (I - A) x_s = B u_s and reads off y_s = C x_s + D u_s.

    Raises:
        numpy.linalg.LinAlgError: If A has an eigenvalue at 1.
    """
    u_s = np.ravel(np.asarray(u_s, dtype=float))
    if u_s.shape != (sys.m,):
        raise ValueError(f"input has shape {u_s.shape}, expected ({sys.m},)")
    eye_minus_a = _check_i_minus_a(sys)
    x_s = np.linalg.solve(eye_minus_a, sys.B @ u_s)
    y_s = sys.C @ x_s + sys.D @ u_s
    return SteadyState(x_s, u_s, y_s)


def dc_gain(sys):
    """Steady-state gain C (I - A)^-1 B + D from input to output."""
    eye_minus_a = _check_i_minus_a(sys)
    return sys.C @ np.linalg.solve(eye_minus_a, sys.B) + sys.D


def steady_input_from_output(sys, y_s, tol=1e-8):
    """Constant input whose steady-state output equals ``y_s``.

    Solves the least-squares problem through the DC gain. The gain must have
    full column rank so the answer is unique.

    Args:
        sys: System with an invertible I - A.
        y_s: Requested steady-state output.
        tol: Max-norm residual above which the output is declared
            unreachable.

    Raises:
        numpy.linalg.LinAlgError: If I - A is singular or the DC gain is
            column rank deficient.
        UnreachableOutputError: If no steady input reproduces ``y_s``.
    """
    y_s = np.ravel(np.asarray(y_s, dtype=float))
    if y_s.shape != (sys.p,):
        raise ValueError(f"output has shape {y_s.shape}, expected ({sys.p},)")
    gain = dc_gain(sys)
    rank, _ = numerical_rank(gain)
    if rank < sys.m:
        raise np.linalg.LinAlgError(
            f"DC gain has column rank {rank} < {sys.m}, steady input not unique"
        )
    u_s, *_ = np.linalg.lstsq(gain, y_s, rcond=None)
    residual = np.max(np.abs(gain @ u_s - y_s)) if sys.p else 0.0
    if residual > tol:
        raise UnreachableOutputError(
            f"output is not attainable at steady state, residual {residual:.3e}",
            residual,
        )
    return u_s
