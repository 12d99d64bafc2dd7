"""Exception hierarchy shared across the estimation engine."""


class DsqpError(Exception):
    """Base class for all engine errors."""


class ConfigError(DsqpError):
    """Invalid run configuration (CLI exit code 2)."""


class NumericalError(DsqpError):
    """Numerical failure in a solver or sampler step (CLI exit code 3)."""


class DataError(DsqpError):
    """Malformed or inconsistent input data (CLI exit code 4)."""


class SingularSystem(NumericalError):
    """The spatial system (I - rho W) is numerically singular.

    ``block`` identifies the offending connected component, when known.
    """

    def __init__(self, message: str, block: int | None = None):
        super().__init__(message)
        self.block = block


class NoConvergence(NumericalError):
    """An iterative routine hit its iteration cap without converging."""


class NonstationaryDraw(NumericalError):
    """The simulator drew quantile levels implying an explosive system."""


class NonmonotoneQuantilePath(NumericalError):
    """A coefficient law violates monotonicity of the response in the quantile level."""


class IllConditioned(NumericalError):
    """A conditional precision matrix failed Cholesky even after jitter."""


class FilterDivergence(NumericalError):
    """A filtering covariance lost positive definiteness beyond repair."""


class NoModeFound(NumericalError):
    """Mode search for the spatial-coefficient proposal found no finite kernel value."""


class UnbalancedPanel(DataError):
    """The long-format panel is missing unit/time cells.

    ``missing`` lists the offending (unit, time) pairs.
    """

    def __init__(self, message: str, missing: list[tuple] | None = None):
        super().__init__(message)
        self.missing = missing or []


class SchemaMismatch(DataError):
    """Input columns do not match the declared schema."""


class RunTooShort(DsqpError):
    """No retained sweeps are available for reporting."""


class WeightDegeneracyWarning(UserWarning):
    """Importance weights are dominated by a few draws (ESS/count < 0.05)."""
