"""
Exception hierarchy for polyvar.

ValidationError subclasses mean the caller asked for something outside the
domain of an operation (CLI exit code 2). NumericError subclasses mean a
well-posed computation failed to meet its tolerance (CLI exit code 3).
"""

from typing import Optional, Tuple


class PolyvarError(Exception):
    """Base class for every error raised by polyvar"""

    exit_code = 1


class ValidationError(PolyvarError, ValueError):
    """Invalid input, parameters or configuration"""

    exit_code = 2


class NumericError(PolyvarError, RuntimeError):
    """A numerical routine did not converge or produced an invalid result"""

    exit_code = 3


class ConfigError(ValidationError):
    """Malformed or inconsistent experiment configuration"""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class DegreeCapError(ValidationError):
    """Polynomial degree above the configured cap"""

    def __init__(self, degree: int, cap: int):
        self.degree = degree
        self.cap = cap
        super().__init__(f"degree {degree} exceeds the degree cap {cap}")


class InvalidDegreeError(ValidationError):
    """Odd or nonpositive degree where an even positive degree is required"""


class UnsupportedPolynomialError(ValidationError):
    """Polynomial with odd powers or zero leading part"""


class DegenerateParametersError(ValidationError):
    """Parameters that collapse a model (for instance theta == rho)"""


class UnsupportedRegimeError(ValidationError):
    """Hurst parameter or drift outside the regime a model supports"""


class RangeError(ValidationError):
    """Observed value outside the range of a moment map"""

    def __init__(self, message: str, interval: Tuple[float, float]):
        self.interval = interval
        super().__init__(f"{message}; admissible interval {interval}")


class WindowError(ValidationError):
    """Trimming or differencing window larger than the path"""


class BranchError(ValidationError):
    """Missing or unknown branch for a non-monotone moment map"""


class QuadratureError(NumericError):
    """Adaptive quadrature did not reach the requested tolerance"""

    def __init__(self, message: str, achieved: float):
        self.achieved = achieved
        super().__init__(f"{message} (achieved error estimate {achieved:.3e})")


class SimulationError(NumericError):
    """Covariance matrix could not be factorized for sampling"""

    def __init__(self, message: str, leading_minor: Optional[int] = None):
        self.leading_minor = leading_minor
        if leading_minor is not None:
            message = f"{message} (leading minor {leading_minor} not positive)"
        super().__init__(message)


class InversionError(NumericError):
    """Moment-map inversion failed to reach the residual tolerance"""

    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


class DivergenceError(NumericError):
    """Breuer-Major condition fails where a finite limit variance is required"""


class ExperimentAbortedError(NumericError):
    """Too many replications failed inside a Monte Carlo experiment"""
