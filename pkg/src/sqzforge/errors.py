"""Exception types shared across sqzforge."""


class ConfigurationError(ValueError):
    """Invalid configuration, geometry, or file contents."""


class WavelengthRangeError(ValueError):
    """A dispersion model was evaluated outside its validity range."""


class ThresholdError(ValueError):
    """An OPO observable was requested at or above oscillation threshold."""


class ModeSolverError(RuntimeError):
    """The eigensolver failed to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class FitError(RuntimeError):
    """A fit could not be carried out or did not converge."""

    def __init__(self, message, residual_norm=None):
        super().__init__(message)
        self.residual_norm = residual_norm


class UnphysicalError(ValueError):
    """Input values that no physical parameter set can produce."""
