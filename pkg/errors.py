"""Exception hierarchy shared by the bloch-chi modules."""

from typing import Any, Optional


class BlochError(Exception):
    """Base class for every failure the library reports to callers.

    ``exit_code`` is what the command line maps the error to; ``details``
    carries machine-readable context that ends up in the JSON error record.
    """

    exit_code = 1

    def __init__(self, message: str, details: Optional[dict[str, Any]] = None):
        self.details = dict(details or {})
        super().__init__(message)


class PotentialError(BlochError):
    """Unknown fixture name or malformed coefficient records."""


class CutoffError(BlochError):
    """Basis or band cutoff incompatible with the request."""


class EigensolverError(BlochError):
    """Dense diagonalization failed or left residuals above tolerance."""


class DegeneracyError(BlochError):
    """A band required to be isolated is degenerate at the given k."""

    def __init__(self, message: str, band: int = 0, k: Any = None, gap: float = 0.0):
        super().__init__(message, {"band": band, "k": None if k is None else [float(x) for x in k], "gap": gap})
        self.band = band
        self.gap = gap


class CapacityError(BlochError):
    """Density outside what the truncated model can hold."""


class SemimetalError(BlochError):
    """The gap controlling the Fermi energy is closed within tolerance."""


class ClassificationError(BlochError):
    """A zero-temperature path was requested for the wrong Fermi variant."""


class QuadratureError(BlochError):
    """Numerical integration failed to reach the requested tolerance."""

    def __init__(self, message: str, achieved: float = float("nan")):
        super().__init__(message, {"achieved_tolerance": achieved})
        self.achieved = achieved


class ResidueOrderError(BlochError):
    """Derivative order beyond the logistic recurrence depth."""


class SurfaceError(BlochError):
    """Fermi surface too degenerate for the tetrahedron integral."""


class ConfigError(BlochError):
    """Configuration file could not be parsed or validated."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message, {"line": line})
        self.line = line


class VerificationError(BlochError):
    """One or more invariant checks of the verification suite failed."""

    exit_code = 2
