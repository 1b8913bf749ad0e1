"""Exception types shared across the package.

Every user-facing entry point raises one of these (or a plain ValueError for
programming mistakes).  The CLI maps DomainError and its subclasses to exit
code 2, check failures to exit code 1.
"""


class DomainError(ValueError):
    """An argument is outside the mathematical domain of the operation."""


class SingularityError(DomainError):
    """Evaluation requested exactly at a point where the kernel diverges."""


class GridMismatchError(ValueError):
    """Two grid measures disagree on the grid of a shared slot."""


class WindowExitError(RuntimeError):
    """A queried point left the declared noise window."""


class CacheVersionError(RuntimeError):
    """A cached artifact was written by an incompatible format version."""


class SchemaError(ValueError):
    """An experiment configuration violates its schema."""
