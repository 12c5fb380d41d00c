"""Exception hierarchy shared by the filters, models and experiment driver."""


class LinpamError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(LinpamError, ValueError):
    pass


class DimensionError(LinpamError, ValueError):
    pass


class RankDeficiency(LinpamError, ValueError):
    pass


class NumericalBlowup(LinpamError, FloatingPointError):
    pass


class StiffnessError(LinpamError, RuntimeError):
    """Adaptive step size collapsed below the admissible minimum."""


class EnsembleTooSmall(LinpamError, ValueError):
    pass


class SingularInnovationCovariance(LinpamError, ArithmeticError):
    pass


class Diverged(LinpamError, FloatingPointError):
    """The ensemble left the finite range during an analysis or forecast."""


class DegenerateMarginal(LinpamError, ValueError):
    """All samples of a marginal coincide, so quantile features are undefined."""


class InversionBracketFailure(LinpamError, RuntimeError):
    pass


class ConstantInvariantViolated(LinpamError, ValueError):
    pass


class AllDiverged(LinpamError, RuntimeError):
    pass
