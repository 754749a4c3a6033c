"""
polyvar: polynomial variations of stationary and near-stationary Gaussian
sequences, their Berry-Esseen bounds, moment-map drift estimators for
fractional Ornstein-Uhlenbeck models, and Monte Carlo rate studies.
"""

from .cov_models import CovKernel, ProcessModel
from .errors import NumericError, PolyvarError, ValidationError
from .hermite_basis import HermitePoly, lambda_target, poly_to_hermite, variation_poly
from .variation_stats import VariationReport, variation_report

__version__ = "0.1.0"

__all__ = [
    "CovKernel",
    "HermitePoly",
    "NumericError",
    "PolyvarError",
    "ProcessModel",
    "ValidationError",
    "VariationReport",
    "lambda_target",
    "poly_to_hermite",
    "variation_poly",
    "variation_report",
]
