"""Design and analysis toolkit for thin-film lithium niobate ring squeezers.

Modules: ``material`` (dispersion), ``modesolver`` (full-vector FD modes),
``phasematch`` (sweeps, crossings, ring combs), ``cavity`` (resonance
algebra, photorefractive scans), ``opo`` (gain and squeezing), ``fit``
(Levenberg-Marquardt and fit models) and ``cli``.
"""
from .errors import (ConfigurationError, FitError, ModeSolverError, ThresholdError,
                     UnphysicalError, WavelengthRangeError)
from .trace import Trace, read_trace, write_trace

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "FitError", "ModeSolverError", "ThresholdError", "UnphysicalError",
    "WavelengthRangeError", "Trace", "read_trace", "write_trace", "__version__",
]
