"""Exception types shared across the package.

The error channels are kept deliberately coarse: bad caller input raises
InvalidArgumentError, numbers going non-finite mid-computation raises
NumericalFailureError, and iterative procedures that are *allowed* to fail
report through flags on their result objects -- ConvergenceFailureError exists
for the few places where continuing would be meaningless.
"""


class InvalidArgumentError(ValueError):
    """A caller-supplied argument is malformed or out of range."""


class NumericalFailureError(ArithmeticError):
    """A computed quantity became NaN/inf where finiteness is required."""


class ConvergenceFailureError(RuntimeError):
    """An iteration that must converge to proceed did not."""


class ValidationFailureError(RuntimeError):
    """A coefficient-set self-check found a derivative that does not match."""


class SeriesNotFoundError(LookupError):
    """A requested output table is not present in the given results."""
