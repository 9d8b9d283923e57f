"""Hankel matrices, persistency of excitation, and trajectory membership.

Everything the controller knows about the plant enters through this module:
a single recorded input-output trajectory, stacked into Hankel matrices. A
length-L window (u, y) is a trajectory of the data-generating LTI system
exactly when it lies in the column span of the stacked input and output
Hankel matrices, provided the recorded input was persistently exciting of
order L + n. That span test is what replaces the state-space model.
"""

import numpy as np

from .plant import Trajectory, _as_samples, _readonly, numerical_rank


class PersistenceError(ValueError):
    """Raised when data fails a required persistency-of-excitation check.

    Attributes:
        report: The failing PeReport.
    """

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


class DataTrajectory:
    """A recorded input-output trajectory used as the plant description.

    Unlike the generic Trajectory container this must be non-empty, since an
    empty record describes nothing.
    """

    def __init__(self, u, y):
        self.u = _readonly(_as_samples(u))
        self.y = _readonly(_as_samples(y))
        if self.u.shape[0] != self.y.shape[0]:
            raise ValueError(
                f"input length {self.u.shape[0]} != output length {self.y.shape[0]}"
            )
        if self.u.shape[0] < 1:
            raise ValueError("a data trajectory needs at least one sample")

    @classmethod
    def from_trajectory(cls, traj):
        return cls(traj.u, traj.y)

    @property
    def length(self):
        return self.u.shape[0]

    @property
    def m(self):
        return self.u.shape[1]

    @property
    def p(self):
        return self.y.shape[1]

    def __len__(self):
        return self.length


class HankelBlock:
    """Block Hankel matrix of a vector sequence.

    Column j stacks the window ``seq[j], ..., seq[j + depth - 1]`` into a
    single vector, so the matrix has shape (depth * dim, N - depth + 1).
    """

    def __init__(self, depth, dim, matrix):
        self.depth = int(depth)
        self.dim = int(dim)
        self.matrix = _readonly(matrix)
        expect = (self.depth * self.dim, self.matrix.shape[1])
        if self.matrix.shape != expect:
            raise ValueError(f"matrix has shape {self.matrix.shape}, expected {expect}")

    @property
    def n_columns(self):
        return self.matrix.shape[1]


def hankel(seq, depth):
    """Stack a sequence into its depth-L block Hankel matrix.

    Args:
        seq: Array-like of shape (N, d); 1-D input is treated as d = 1.
        depth: Window length L >= 1.

    Returns:
        HankelBlock with ``N - depth + 1`` columns.

    Raises:
        ValueError: If depth < 1 or the sequence is shorter than depth.
    """
    seq = _as_samples(seq)
    n_samples, dim = seq.shape
    depth = int(depth)
    if depth < 1:
        raise ValueError(f"window length must be at least 1, got {depth}")
    if n_samples < depth:
        raise ValueError(
            f"sequence of length {n_samples} has no window of length {depth}"
        )
    n_cols = n_samples - depth + 1
    mat = np.empty((depth * dim, n_cols))
    for j in range(n_cols):
        mat[:, j] = seq[j : j + depth].ravel()
    return HankelBlock(depth, dim, mat)


class PeReport:
    """Outcome of a persistency-of-excitation check.

    Truthiness equals ``excited``. ``margin`` is the smallest singular value
    counted toward the rank, so a tiny margin warns that the check is about
    to fail numerically. ``structurally_impossible`` is set when no input of
    the given length could ever pass, i.e. the Hankel matrix is wider than
    it is tall only when N >= (m + 1) * order - 1.
    """

    def __init__(self, excited, order, rank, required_rank, margin,
                 structurally_impossible, detail):
        self.excited = bool(excited)
        self.order = int(order)
        self.rank = int(rank)
        self.required_rank = int(required_rank)
        self.margin = float(margin)
        self.structurally_impossible = bool(structurally_impossible)
        self.detail = detail

    def __bool__(self):
        return self.excited

    def __repr__(self):
        verdict = "excited" if self.excited else "not excited"
        return (
            f"PeReport(order={self.order}, {verdict}, rank={self.rank}/"
            f"{self.required_rank}, margin={self.margin:.3e})"
        )


def is_persistently_exciting(u, order, rtol=None):
    """Check persistency of excitation of a given order.

    An input sequence of length N with m channels is persistently exciting
    of order L when its depth-L Hankel matrix has full row rank m * L. This
    requires N >= (m + 1) * L - 1 regardless of the values, and that
    structural shortfall is reported separately from a plain rank failure.

    Args:
        u: Input samples, shape (N, m).
        order: Requested order L >= 1.
        rtol: Optional override of the rank threshold.

    Returns:
        PeReport; truthy exactly when the check passes.
    """
    u = _as_samples(u)
    n_samples, m = u.shape
    order = int(order)
    if order < 1:
        raise ValueError(f"order must be at least 1, got {order}")
    required = m * order
    structural = n_samples < (m + 1) * order - 1
    if n_samples < order:
        return PeReport(
            False, order, 0, required, 0.0, True,
            f"need at least {(m + 1) * order - 1} samples, have {n_samples}",
        )
    block = hankel(u, order)
    rank, margin = numerical_rank(block.matrix, rtol)
    excited = rank == required and not structural
    detail = "" if excited else (
        f"need at least {(m + 1) * order - 1} samples, have {n_samples}"
        if structural
        else f"Hankel rank {rank} < {required}"
    )
    return PeReport(excited, order, rank, required, margin, structural, detail)


def max_pe_order(u, rtol=None):
    """Largest order of persistency of excitation the sequence satisfies.

    Returns 0 when not even order 1 holds (e.g. the zero sequence).
    """
    u = _as_samples(u)
    n_samples, m = u.shape
    # orders beyond this bound fail structurally, no need to test them
    ceiling = (n_samples + 1) // (m + 1)
    best = 0
    for order in range(1, ceiling + 1):
        if is_persistently_exciting(u, order, rtol):
            best = order
        else:
            break
    return best


def generate_pe_input(m, length, bounds=(-1.0, 1.0), seed=None):
    """Sample an input sequence uniformly inside a box.

    Uniform independent samples are persistently exciting of every
    structurally possible order with probability one, which makes this the
    default excitation for data collection.

    Args:
        m: Number of input channels.
        length: Number of samples N >= 1.
        bounds: Pair (lower, upper), scalars or length-m arrays.
        seed: Seed for the random generator; equal seeds give bitwise
            identical sequences.
    """
    if length < 1:
        raise ValueError(f"length must be at least 1, got {length}")
    lower = np.broadcast_to(np.asarray(bounds[0], dtype=float), (m,))
    upper = np.broadcast_to(np.asarray(bounds[1], dtype=float), (m,))
    if np.any(lower >= upper):
        raise ValueError("lower bounds must be strictly below upper bounds")
    rng = np.random.default_rng(seed)
    return rng.uniform(lower, upper, (int(length), m))


def stacked_window(seq, start, stop):
    """Flatten the contiguous slice ``seq[start:stop + 1]`` into one vector."""
    seq = _as_samples(seq)
    if not 0 <= start <= stop < seq.shape[0]:
        raise ValueError(
            f"window [{start}, {stop}] out of range for length {seq.shape[0]}"
        )
    return seq[start : stop + 1].ravel()


class MembershipResult:
    """Span test outcome: the max-norm residual and the coefficient vector."""

    def __init__(self, residual, alpha, is_member):
        self.residual = float(residual)
        self.alpha = _readonly(alpha)
        self.is_member = bool(is_member)

    def __bool__(self):
        return self.is_member


def trajectory_membership(data, window, order, tol=1e-6, rtol=None):
    """Test whether a window is a trajectory of the data-generating system.

    Solves the least-squares problem ``[H_L(u); H_L(y)] alpha = [u_w; y_w]``
    with the minimum-norm solution and reports the max-norm residual. When
    the recorded input is persistently exciting of order L + n (n the system
    order), a residual of zero is equivalent to the window being a genuine
    system trajectory; without that excitation the test is vacuous, so the
    check is refused.

    Args:
        data: Recorded DataTrajectory.
        window: Candidate window, anything with ``u`` and ``y`` arrays or a
            pair ``(u, y)``.
        order: System order n used in the excitation requirement.
        tol: Residual threshold for membership.
        rtol: Optional rank threshold override for the excitation check.

    Raises:
        PersistenceError: If the data is not persistently exciting of order
            L + n.
    """
    if isinstance(window, tuple):
        win_u, win_y = (_as_samples(w) for w in window)
    else:
        win_u, win_y = _as_samples(window.u), _as_samples(window.y)
    if win_u.shape[0] != win_y.shape[0]:
        raise ValueError("window input and output lengths differ")
    depth = win_u.shape[0]
    if depth < 1:
        raise ValueError("window must contain at least one sample")
    if win_u.shape[1] != data.m or win_y.shape[1] != data.p:
        raise ValueError("window channel counts do not match the data")
    report = is_persistently_exciting(data.u, depth + int(order), rtol)
    if not report:
        raise PersistenceError(
            f"data is not persistently exciting of order {depth + int(order)}"
            f" ({report.detail}); the membership test would be vacuous",
            report,
        )
    stacked = np.vstack([hankel(data.u, depth).matrix, hankel(data.y, depth).matrix])
    target = np.concatenate([win_u.ravel(), win_y.ravel()])
    alpha, *_ = np.linalg.lstsq(stacked, target, rcond=None)
    residual = float(np.max(np.abs(stacked @ alpha - target)))
    return MembershipResult(residual, alpha, residual <= tol)
