"""Exception hierarchy shared across the package."""


class IglError(Exception):
    """Base class for all package errors."""


class ConfigError(IglError, ValueError):
    """Invalid environment or experiment configuration."""


class IdentifiabilityError(ConfigError):
    """Reward structure violates the heterogeneous/homogeneous state condition."""


class PosteriorDomainError(IglError, ValueError):
    """Posterior conditioned on a zero-probability feedback event."""


class NumericalError(IglError, ArithmeticError):
    """An iterative solver failed to converge."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class CollectionBudgetError(IglError, RuntimeError):
    """Tuple collection exceeded its episode cap."""


class PipelineError(IglError):
    """A pipeline phase failed; carries the phase name and the partial report."""

    def __init__(self, phase, cause, partial_report=None):
        super().__init__(f"phase '{phase}' failed: {cause}")
        self.phase = phase
        self.cause = cause
        self.partial_report = partial_report


class InconsistentDataError(IglError, ValueError):
    """Observed data has zero probability under the reference model."""
