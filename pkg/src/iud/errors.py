"""Exception types shared across the package."""


class IudError(Exception):
    """Base class for package-specific failures."""


class InsufficientDataError(IudError, ValueError):
    """A statistic was requested from cells with too few observations."""


class UndefinedStatisticError(IudError, ValueError):
    """The statistic is undefined for these counts (e.g. zero variance in both arms)."""


class SingularStatisticError(IudError, ValueError):
    """The quadratic-form inner matrix is singular."""


class DegenerateSampleError(IudError, ValueError):
    """All successes or all failures: the boundary supremum is undefined."""


class ConfigurationError(IudError, ValueError):
    """Invalid configuration document or missing trace data."""


class UnsupportedMetricError(IudError, ValueError):
    """The metric is only defined for two-treatment trials."""


class UndefinedMetricError(IudError, ValueError):
    """The metric has no value here (e.g. every stratum has tied true rates)."""
