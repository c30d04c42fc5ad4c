"""Exception types shared across the library."""

from __future__ import annotations


class DimensionMismatchError(ValueError):
    """An array argument has the wrong size along a named axis."""

    def __init__(self, axis: str, expected, got):
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"dimension mismatch on axis '{axis}': expected {expected}, got {got}")


class InvalidConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class NonFiniteError(FloatingPointError):
    """A training step produced a non-finite quantity.

    Carries a diagnostic snapshot: the step index and the largest finite
    magnitude seen in the offending array.
    """

    def __init__(self, what: str, step: int, max_finite_abs: float):
        self.what = what
        self.step = step
        self.max_finite_abs = max_finite_abs
        super().__init__(
            f"non-finite {what} at step {step} (max finite |entry| = {max_finite_abs:.6g})"
        )


class DegenerateFitError(ValueError):
    """A geometric-rate fit has no usable points (e.g. coupled copies coincide)."""
