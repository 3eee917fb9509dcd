"""Exception taxonomy shared across the package."""


class VeriginError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(VeriginError):
    """Malformed or inconsistent configuration (grid counts, schema, units)."""


class DomainError(VeriginError):
    """Density argument outside the declared valid density interval."""


class RangeError(VeriginError):
    """Pressure (or potential) argument outside the attainable range."""


class FeasibilityError(VeriginError):
    """A hydrostatic potential window leaves the image of the constitutive map.

    Carries the offending phase (1 or 2) and y location when known.
    """

    def __init__(self, message, phase=None, y=None):
        super().__init__(message)
        self.phase = phase
        self.y = y


class NoConvergence(VeriginError):
    """An iterative solver hit its iteration cap without meeting tolerance."""


class SingularJacobian(VeriginError):
    """Jacobian numerically singular inside a Newton solve."""


class InternalInvariantViolation(VeriginError):
    """A mathematically guaranteed property failed numerically; likely a bug."""


class DegenerateEquilibrium(VeriginError):
    """Phase-transition equilibrium with (near-)zero interface density jump."""


class IsolationFailure(VeriginError):
    """Case-(ii) isolation criterion violated: density jump equals gamma*c."""


class SolveError(VeriginError):
    """An interior linear system that should be invertible was singular."""


class EigSolveFailure(VeriginError):
    """Eigenvalue iteration failed to converge to the requested residuals."""


class BranchTrackingError(VeriginError):
    """Eigenvalue-branch matching over a parameter grid was ambiguous."""


class DegenerateThreshold(VeriginError):
    """A classification threshold is too close to a spectral degeneracy."""


class CompatibilityError(VeriginError):
    """Initial data violate one or more interface/boundary compatibility
    conditions.  ``violations`` lists (name, residual) pairs."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class StepFailure(VeriginError):
    """A time step could not be completed (singular solve or mesh bound)."""


class FitError(VeriginError):
    """No usable monotone window found for a growth/decay rate fit."""
