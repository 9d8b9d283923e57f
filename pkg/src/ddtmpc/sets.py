"""Axis-aligned box constraint sets."""

import numpy as np

from .plant import _readonly


class BoxSet:
    """A box {x : lower <= x <= upper}, the constraint sets used throughout.

    Bounds are finite arrays of equal length. ``scale`` multiplies both
    bounds by a factor, which for factors below one shrinks the box toward
    the origin; that is how the interior equilibrium sets are derived from
    the operating constraints.
    """

    def __init__(self, lower, upper):
        self.lower = _readonly(np.ravel(np.asarray(lower, dtype=float)))
        self.upper = _readonly(np.ravel(np.asarray(upper, dtype=float)))
        if self.lower.shape != self.upper.shape:
            raise ValueError("lower and upper must have the same length")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("box bounds must be finite")
        if np.any(self.lower > self.upper):
            bad = int(np.argmax(self.lower > self.upper))
            raise ValueError(f"lower[{bad}] > upper[{bad}]")

    @property
    def dim(self):
        return self.lower.shape[0]

    def contains(self, x, tol=0.0):
        return bool(self.violation(x) <= tol)

    def violation(self, x):
        """Largest bound violation of x, zero when inside."""
        x = np.ravel(np.asarray(x, dtype=float))
        if x.shape != self.lower.shape:
            raise ValueError(f"point has shape {x.shape}, expected {self.lower.shape}")
        return float(np.max(np.maximum(
            np.maximum(self.lower - x, x - self.upper), 0.0)))

    def clip(self, x):
        return np.clip(np.ravel(np.asarray(x, dtype=float)),
                       self.lower, self.upper)

    def scale(self, factor):
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return BoxSet(factor * self.lower, factor * self.upper)

    def contains_box(self, other, tol=0.0):
        """Whether another box sits inside this one."""
        return bool(np.all(other.lower >= self.lower - tol)
                    and np.all(other.upper <= self.upper + tol))

    def __repr__(self):
        return f"BoxSet(lower={self.lower.tolist()}, upper={self.upper.tolist()})"
