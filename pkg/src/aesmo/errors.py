"""Exception hierarchy shared by all modules."""


class AesmoError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(AesmoError, ValueError):
    """Invalid argument or malformed input data."""


class FitError(AesmoError):
    """A least-squares fit failed to converge or is ill-posed."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegenerateFitError(FitError):
    """The data carries no identifiable dynamics (e.g. a flat line)."""


class NoPulseError(ValidationError):
    """The segment contains no current step to identify from."""


class TelemetryFormatError(ValidationError):
    """CSV telemetry could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ObservabilityError(ValidationError):
    """The (A, C) pair is not observable."""


class InfeasibleError(AesmoError):
    """The matrix inequality has no strictly feasible point for the given config."""

    def __init__(self, message, lambda_max_w):
        super().__init__(f"{message} (best lambda_max(W) = {lambda_max_w:.6g})")
        self.lambda_max_w = lambda_max_w
