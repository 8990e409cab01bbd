"""Exception types shared across the package.

Every error carries a short machine-readable ``code`` so the command line
front end can report failures uniformly.  Errors deriving from
:class:`UsageError` map to exit status 2 (bad invocation), everything else
deriving from :class:`IcpwError` maps to exit status 1 (computation failed).
"""


class IcpwError(Exception):
    """Base class for all package errors."""

    code = "error"


class UsageError(IcpwError):
    """Invalid invocation: unknown flags, missing files, bad combinations."""

    code = "usage"


class SchemaError(IcpwError):
    """A required column is missing from an input file."""

    code = "schema"


class ParseError(IcpwError):
    """A cell could not be parsed; message includes the row index."""

    code = "parse"


class EmptyDataError(IcpwError):
    """Input file contains no data rows."""

    code = "empty-data"


class DataError(IcpwError):
    """A dataset invariant is violated (treatment codes, sizes, ...)."""

    code = "data"


class DegeneracyError(IcpwError):
    """Conditional distribution is degenerate (constant treatment vector)."""

    code = "degenerate"


class DomainError(IcpwError):
    """An argument is outside its mathematical domain."""

    code = "domain"


class SizeError(IcpwError):
    """Problem size exceeds an enumeration or state-space cap."""

    code = "size"


class EstimabilityError(IcpwError):
    """Requested quantity is not estimable from the data supplied."""

    code = "estimability"


class SeparationError(IcpwError):
    """Likelihood is maximised only on the boundary (separated data)."""

    code = "separation"


class ConvergenceError(IcpwError):
    """An iterative fit failed to converge within its iteration budget."""

    code = "convergence"


class SingularMatrixError(IcpwError):
    """A matrix that must be inverted is numerically singular."""

    code = "singular"


class NumericalError(IcpwError):
    """A computed quantity violates a sign or magnitude guarantee."""

    code = "numerical"


class BootstrapError(IcpwError):
    """Too many bootstrap replicates failed for the summary to be trusted."""

    code = "bootstrap"
