"""Exception types shared across the package."""


class FluxcountError(Exception):
    """Base class for package errors."""


class ConfigError(FluxcountError):
    """Bad or missing configuration. CLI maps this to exit code 2."""


class DependencyError(FluxcountError):
    """A required input artifact is missing. CLI maps this to exit code 3."""


class ParameterError(FluxcountError, ValueError):
    """Physical parameters out of range beyond what clamping should hide."""


class FitError(FluxcountError):
    """A fit could not be performed or did not converge."""


class CharacterizationFitError(FitError):
    """Efficiency fit impossible; carries the fallback dark-count estimate."""

    def __init__(self, message: str, delta_estimate: float | None = None):
        super().__init__(message)
        self.delta_estimate = delta_estimate


class IntegrationError(FluxcountError):
    """Numerical integration failed its accuracy check."""


class UndecidableSequenceError(FluxcountError):
    """Both hypotheses assign zero likelihood to a readout sequence."""
