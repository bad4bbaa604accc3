"""Exception hierarchy shared by every module of the package."""


class OPEError(Exception):
    """Base class for all errors raised by ``drunknown``."""


class AbsoluteContinuityViolation(OPEError):
    """A logging probability is at or below the propensity floor where the target is positive."""


class NumericalOverflow(OPEError):
    pass


class NonConvergence(OPEError):
    """A Newton-type solver failed to reach its tolerance."""


class SingularInformation(OPEError):
    """The (ridge-regularized) information or Jacobian matrix is numerically singular."""


class SingularSystem(OPEError):
    pass


class MissingPropensity(OPEError):
    """A known-policy estimator was given records without logged propensities."""


class UnsupportedHorizon(OPEError):
    pass


class SchemaError(OPEError):
    """Malformed tabular input (ragged rows, bad labels, bad header)."""


class ConfigError(OPEError):
    pass
