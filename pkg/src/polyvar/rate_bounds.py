"""
Explicit Berry-Esseen constants, distance bounds and rate-regime tables.

Everything here is deterministic: constants come from the Hermite
coefficients, bounds from the exact cumulants of the quadratic statistic,
and rate classes from the tail exponent alpha of |r(k)| ~ c k^{-alpha}
(alpha = 2 - 2H for fBm-scale kernels, plus 2p after p finite differences).

Usage:
    from polyvar.rate_bounds import tv_upper_bound, rate_class_for
    bound = tv_upper_bound(poly, fgn_kernel(0.6), 1024, "exact_variance")
    cls = rate_class_for(ProcessModel("fou", H=0.7, theta=1.0), 2, "asymptotic_variance")
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np

from .cov_models import CovKernel, ProcessModel, finite_diff_kernel, oufou_kernels
from .errors import DivergenceError, ValidationError
from .hermite_basis import (
    HermitePoly,
    double_factorial_odd,
    log_binom,
    log_factorial,
    variation_poly,
)
from .variation_stats import (
    align_poly,
    exact_var_U,
    quad_cumulants,
    u_limit,
    variance_discrepancy,
)

logger = logging.getLogger(__name__)

NORMALIZATIONS = ("exact_variance", "asymptotic_variance", "none")
BOUNDARY_TOL = 1e-12


class RateClass(NamedTuple):
    """Predicted decay n^slope (log n)^log_power of the distance to normal"""

    name: str
    slope: Optional[float]
    log_power: float = 0.0

    @property
    def normal(self) -> bool:
        return self.name != "nonnormal"


RATE_CLASS_NAMES = (
    "sqrt_n",
    "log2_sqrt_n",
    "pow_6H_minus_4p5",
    "log_neg_3_2",
    "quarter",
    "pow_4H_minus_3",
    "pow_2H_minus_1p5",
    "log_neg_1_4",
    "log_variance_regime",
    "nonnormal",
)


# ---------------------------------------------------------------------------
# Appendix constants
# ---------------------------------------------------------------------------


@dataclass
class AppendixConstants:
    C1q: float
    C2q: float
    Cq: float
    # the quadratic-case value quoted in the discussion of x^2: 2 sqrt(2) r(0)
    C2_text: float


def _c1_inner(k: int) -> float:
    """sum_{j=1}^{2k-1} j^2 (j!)^2 C(2k, j)^4 (4k-2j)!"""
    j = np.arange(1, 2 * k)
    logs = (
        2.0 * np.log(j)
        + 2.0 * log_factorial(j)
        + 4.0 * log_binom(2 * k, j)
        + log_factorial(4 * k - 2 * j)
    )
    return float(np.sum(np.exp(logs)))


def _c2_pair(k: int, m: int, dk: float, dm: float, r0: float) -> float:
    first = math.exp(
        2.0 * log_factorial(2 * k)
        + 2.0 * log_binom(2 * m - 1, 2 * k - 1)
        + log_factorial(2 * m - 2 * k)
    ) * dk**4 / (2.0 * r0**2)
    j = np.arange(1, 2 * k)
    logs = (
        2.0 * log_factorial(m - 1)
        + 2.0 * log_binom(2 * k - 1, j - 1)
        + 2.0 * log_binom(2 * m - 1, j - 1)
        + log_factorial(2 * k + 2 * m - 2 * j)
    )
    second = 2.0 * k**2 * (dk**4 + dm**4) * float(np.sum(np.exp(logs)))
    return (1.0 + k / m) * math.sqrt(max(first, second))


def appendix_constants(poly: HermitePoly) -> AppendixConstants:
    """C_{1,q}, C_{2,q} and C_q = 2 max(C_{1,q}, C_{2,q})"""
    d = poly.d
    half = poly.degree // 2
    c1 = sum(
        d[k] ** 2 / (2 * k) * math.sqrt(_c1_inner(k))
        for k in range(1, half + 1)
        if d[k] != 0.0
    )
    c2 = sum(
        _c2_pair(k, m, d[k], d[m], poly.ref_var)
        for k in range(1, half + 1)
        for m in range(k + 1, half + 1)
    )
    return AppendixConstants(
        C1q=float(c1),
        C2q=float(c2),
        Cq=2.0 * max(c1, c2),
        C2_text=2.0 * math.sqrt(2.0) * poly.ref_var,
    )


# ---------------------------------------------------------------------------
# Distance bounds
# ---------------------------------------------------------------------------


def _check_normalization(normalization: str) -> None:
    if normalization not in NORMALIZATIONS:
        raise ValidationError(
            f"unknown normalization '{normalization}', expected one of {NORMALIZATIONS}"
        )


def _fourth_moment_term(kernel: CovKernel, n: int) -> float:
    k4 = max(quad_cumulants(kernel, n).kappa4_F, 0.0)
    return math.sqrt(math.sqrt(k4) + k4)


def tv_upper_bound(
    poly: HermitePoly, kernel: CovKernel, n: int, normalization: str = "exact_variance"
) -> float:
    """
    C_q sqrt(sqrt(kappa4(F)) + kappa4(F)), plus 2|1 - E[U^2]/u| when U is
    normalized by the limit variance.
    """
    _check_normalization(normalization)
    poly = align_poly(poly, kernel.r0)
    bound = appendix_constants(poly).Cq * _fourth_moment_term(kernel, n)
    if normalization == "asymptotic_variance":
        limit = u_limit(poly, kernel)
        if limit.diverges:
            raise DivergenceError(
                f"{kernel.name}: asymptotic normalization needs the Breuer-Major condition"
            )
        bound += 2.0 * variance_discrepancy(poly, kernel, n, limit)
    return bound


@dataclass
class Kappa3Rate:
    kappa3_F: float
    commensurate_expr: float
    regime: RateClass


def lag_power_sum(kernel: CovKernel, n: int, power: float) -> float:
    """sum_{|k|<n} |r(k)|^power"""
    r = np.abs(kernel.values(n - 1))
    return float(r[0] ** power + 2.0 * np.sum(r[1:] ** power))


def kappa3_rate(kernel: CovKernel, n: int) -> Kappa3Rate:
    """Exact kappa3(F), the commensurate lag-sum expression, and the regime it follows"""
    if n < 2:
        raise ValidationError(f"n must be at least 2, got {n}")
    s32 = lag_power_sum(kernel, n, 1.5)
    s2 = lag_power_sum(kernel, n, 2.0)
    return Kappa3Rate(
        kappa3_F=quad_cumulants(kernel, n).kappa3_F,
        commensurate_expr=s32**2 / (s2**1.5 * math.sqrt(n)),
        regime=rate_class_from_alpha(kernel.tail_exponent, 2, "exact_variance"),
    )


@dataclass
class LConstant:
    value: float
    finite: bool
    nmax: int
    partial_value: float
    tail_numerator: float
    tail_denominator: float


def _power_tail(N: int, power: float, alpha: float, const: float) -> float:
    """sum_{|k|>=N} (const k^{-alpha})^power, midpoint integral from N - 1/2"""
    s = power * alpha
    return 2.0 * const**power * (N - 0.5) ** (1.0 - s) / (s - 1.0)


def L_constant(kernel: CovKernel, nmax: int) -> LConstant:
    """
    L = lim (sum_{|k|<n} |r|^{3/2})^2 / (sum_{|k|<n} r^2)^{3/2}, evaluated at
    n = nmax with the power-law tails of both sums added.
    """
    if nmax < 2:
        raise ValidationError(f"nmax must be at least 2, got {nmax}")
    alpha = kernel.tail_exponent
    if alpha is not None and 1.5 * alpha <= 1.0 + BOUNDARY_TOL:
        logger.info(f"{kernel.name}: sum of |r|^(3/2) diverges, L is infinite")
        return LConstant(math.inf, False, nmax, math.inf, math.inf, math.inf)

    s32 = lag_power_sum(kernel, nmax, 1.5)
    s2 = lag_power_sum(kernel, nmax, 2.0)
    tail32 = tail2 = 0.0
    if alpha is not None and math.isfinite(alpha):
        const = kernel.tail_constant
        if const is None:
            const = abs(kernel.values(nmax - 1)[-1]) * (nmax - 1) ** alpha
        tail32 = _power_tail(nmax, 1.5, alpha, const)
        tail2 = _power_tail(nmax, 2.0, alpha, const)
    return LConstant(
        value=(s32 + tail32) ** 2 / (s2 + tail2) ** 1.5,
        finite=True,
        nmax=nmax,
        partial_value=s32**2 / s2**1.5,
        tail_numerator=tail32,
        tail_denominator=tail2,
    )


# ---------------------------------------------------------------------------
# Non-stationary discrepancy
# ---------------------------------------------------------------------------


def _correction_scale(model: ProcessModel, r0: float) -> float:
    """Standard deviation scale s with |Y_k| <= e^{-gamma k} |W|, W ~ N(0, s^2)"""
    if model.variant == "oufou":
        kernels = oufou_kernels(model.theta, model.rho, model.H)
        c = kernels.pair_matrices(0)[0]
        s_theta = math.sqrt(c[0, 0])
        s_rho = math.sqrt(c[1, 1])
        return (model.rho * s_rho + model.theta * s_theta) / abs(model.rho - model.theta)
    return math.sqrt(r0)


def nonstat_constant(model: ProcessModel, poly: Optional[HermitePoly] = None) -> float:
    """
    c with ||Q(Z+Y) - Q(Z)||_{L^1} <= c e^{-i0 gamma} / n, from the binomial
    expansion of f(Z+Y) - f(Z), Cauchy-Schwarz and Gaussian moments.
    """
    if model.stationary:
        return 0.0
    kernel = model.kernel()
    r0 = kernel.r0
    if poly is None:
        poly = variation_poly("power", 2, r0)
    p = poly.monomial_coeffs()
    sigma = math.sqrt(r0)
    s = _correction_scale(model, r0)
    total = 0.0
    for j in range(1, p.size):
        if p[j] == 0.0:
            continue
        inner = sum(
            math.comb(j, i)
            * math.sqrt(double_factorial_odd(i) * double_factorial_odd(j - i))
            * s**i
            * sigma ** (j - i)
            for i in range(1, j + 1)
        )
        total += abs(p[j]) * inner
    return total / -math.expm1(-model.decay_rate)


def nonstat_discrepancy(
    model: ProcessModel, n: int, i0: int = 0, poly: Optional[HermitePoly] = None
) -> float:
    """Certified bound c e^{-i0 gamma} / n on ||Q(Z+Y) - Q(Z)||_{L^1}; 0 for stationary models"""
    if n < 1:
        raise ValidationError(f"n must be positive, got {n}")
    if i0 < 0:
        raise ValidationError(f"i0 must be nonnegative, got {i0}")
    if model.stationary:
        return 0.0
    return nonstat_constant(model, poly) * math.exp(-i0 * model.decay_rate) / n


# ---------------------------------------------------------------------------
# Rate classes
# ---------------------------------------------------------------------------


def _near(a: float, b: float) -> bool:
    return abs(a - b) <= BOUNDARY_TOL


def rate_class_from_alpha(
    alpha: Optional[float], q: int, normalization: str = "exact_variance"
) -> RateClass:
    """
    Predicted class of d(F, N) from the tail exponent alpha.

    q = 2 with the exact variance follows the third-cumulant table; q = 2 with
    the limit variance adds the n^{1-2 alpha} variance discrepancy; q > 2 goes
    through the fourth root of kappa4 of the quadratic statistic.
    """
    _check_normalization(normalization)
    if alpha is None or not math.isfinite(alpha):
        alpha = math.inf
    if alpha < 0.5 - BOUNDARY_TOL:
        return RateClass("nonnormal", None)

    if q == 2 and normalization != "asymptotic_variance":
        if _near(alpha, 0.5):
            return RateClass("log_neg_3_2", 0.0, -1.5)
        if alpha < 2.0 / 3.0 - BOUNDARY_TOL:
            return RateClass("pow_6H_minus_4p5", 1.5 - 3.0 * alpha)
        if _near(alpha, 2.0 / 3.0):
            return RateClass("log2_sqrt_n", -0.5, 2.0)
        return RateClass("sqrt_n", -0.5)

    if q == 2:
        if _near(alpha, 0.5):
            return RateClass("log_variance_regime", None)
        if alpha <= 0.75 + BOUNDARY_TOL:
            return RateClass("pow_4H_minus_3", 1.0 - 2.0 * alpha)
        return RateClass("sqrt_n", -0.5)

    if _near(alpha, 0.5):
        return RateClass("log_neg_1_4", 0.0, -0.25)
    if alpha <= 0.75 + BOUNDARY_TOL:
        return RateClass("pow_2H_minus_1p5", 0.5 - alpha)
    return RateClass("quarter", -0.25)


def rate_class_for(
    model: ProcessModel,
    q: int,
    normalization: str = "exact_variance",
    diff_order: int = 0,
    kernel: Optional[CovKernel] = None,
) -> RateClass:
    """
    kernel overrides model.kernel(), e.g. the sigma component of OUFOU;
    diff_order is added to its tail exponent.
    """
    if q < 2 or q % 2:
        raise ValidationError(f"q must be an even integer >= 2, got {q}")
    if diff_order < 0:
        raise ValidationError(f"diff_order must be nonnegative, got {diff_order}")
    alpha = (kernel if kernel is not None else model.kernel()).tail_exponent
    if alpha is not None:
        alpha = alpha + 2 * diff_order
    return rate_class_from_alpha(alpha, q, normalization)


# ---------------------------------------------------------------------------
# Envelopes of the non-stationary and two-sided results
# ---------------------------------------------------------------------------


def wasserstein_upper_bound(
    poly: HermitePoly,
    model: ProcessModel,
    n: int,
    normalization: str = "exact_variance",
    i0: int = 0,
    kernel: Optional[CovKernel] = None,
) -> float:
    """
    d_W(U(Z+Y)/sqrt(E[U(Z)^2]), N) <= sqrt(n) ||Q(Z+Y)-Q(Z)||_1 / sqrt(E[U^2])
        + C_q sqrt(2/pi) sqrt(sqrt(kappa4) + kappa4)
        [+ sqrt(8/pi) |1 - E[U^2]/u| with the limit variance]
    """
    _check_normalization(normalization)
    kernel = kernel or model.kernel()
    poly = align_poly(poly, kernel.r0)
    var_u = exact_var_U(poly, kernel, n)
    shift = math.sqrt(n) * nonstat_discrepancy(model, n, i0, poly) / math.sqrt(var_u)
    bound = shift + appendix_constants(poly).Cq * math.sqrt(2.0 / math.pi) * (
        _fourth_moment_term(kernel, n)
    )
    if normalization == "asymptotic_variance":
        limit = u_limit(poly, kernel)
        if limit.diverges:
            raise DivergenceError(
                f"{kernel.name}: asymptotic normalization needs the Breuer-Major condition"
            )
        bound += math.sqrt(8.0 / math.pi) * variance_discrepancy(poly, kernel, n, limit)
    return bound


@dataclass
class TwoSidedBounds:
    lower: float
    upper: float
    c2: float
    admissible: bool


def optimal_two_sided_bounds(
    c1: float, C1: float, L: float, c3: float, c4: float, n: int, eps: float = 0.1
) -> TwoSidedBounds:
    """
    (c1 L - (1+eps)(c3+c4))/sqrt(n) <= d_W <= (C1 L + c3 + c4)/sqrt(n), valid
    once c2 - (1+eps)(c3+c4) > 0 with c2 = 2 c1 L. c1 and C1 are calibration
    inputs.
    """
    if min(c1, C1, L, c3, c4) < 0 or eps <= 0:
        raise ValidationError("two-sided constants must be nonnegative and eps positive")
    root_n = math.sqrt(n)
    c2 = 2.0 * c1 * L
    return TwoSidedBounds(
        lower=(c1 * L - (1.0 + eps) * (c3 + c4)) / root_n,
        upper=(C1 * L + c3 + c4) / root_n,
        c2=c2,
        admissible=c2 - (1.0 + eps) * (c3 + c4) > 0,
    )


def c4_constant(kernel: CovKernel, nmax: int) -> float:
    """sup over n = 2^j <= nmax of sqrt(n) |u - E[U^2]| / (2u) for f_2 = x^2"""
    poly = variation_poly("power", 2, kernel.r0)
    limit = u_limit(poly, kernel)
    if limit.diverges:
        return math.inf
    best = 0.0
    n = 2
    while n <= nmax:
        best = max(best, math.sqrt(n) * variance_discrepancy(poly, kernel, n, limit) / 2.0)
        n *= 2
    return best


def c3_constant(model: ProcessModel) -> float:
    """c3 with ||Q(Z+Y) - Q(Z)||_1 <= c3 sqrt(u_{f_2}) / n"""
    kernel = model.kernel()
    poly = variation_poly("power", 2, kernel.r0)
    limit = u_limit(poly, kernel)
    if limit.diverges:
        return math.inf
    return nonstat_constant(model, poly) / math.sqrt(limit.value)


def log_variance_asymptote(poly: HermitePoly, tail_constant: float, n: int) -> float:
    """E[U^2] ~ 4 c^2 d_2^2 log(n) / r0^2 when r(k) ~ c k^{-1/2}"""
    if n < 2:
        raise ValidationError(f"n must be at least 2, got {n}")
    return 4.0 * tail_constant**2 * poly.d[1] ** 2 * math.log(n) / poly.ref_var**2


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class BoundReport:
    n: int
    C1q: float
    C2q: float
    Cq: float
    C2_text: float
    tv_bound: float
    variance_discrepancy: float
    kappa3_expr: float
    kappa3_F: float
    L: float
    L_finite: bool
    rate_class: str
    predicted_slope: Optional[float]
    c3_bound: float
    c4_bound: float
    nonstat_bound: float

    def to_dict(self) -> Dict:
        return {
            key: (None if isinstance(v, float) and not math.isfinite(v) else v)
            for key, v in asdict(self).items()
        }


def bound_report(
    poly: HermitePoly,
    model: ProcessModel,
    n: int,
    normalization: str = "exact_variance",
    i0: int = 0,
    diff_order: int = 0,
    kernel: Optional[CovKernel] = None,
) -> BoundReport:
    """All bounds of one (poly, model, n) cell; BM failures show up as inf, not errors"""
    kernel = kernel or finite_diff_kernel(model.kernel(), diff_order)
    poly = align_poly(poly, kernel.r0)
    constants = appendix_constants(poly)
    limit = u_limit(poly, kernel)
    tv_norm = normalization if not limit.diverges else "exact_variance"
    k3 = kappa3_rate(kernel, n)
    L = L_constant(kernel, max(n, 1024))
    cls = rate_class_for(model, poly.degree, normalization, diff_order)
    return BoundReport(
        n=n,
        C1q=constants.C1q,
        C2q=constants.C2q,
        Cq=constants.Cq,
        C2_text=constants.C2_text,
        tv_bound=tv_upper_bound(poly, kernel, n, tv_norm),
        variance_discrepancy=variance_discrepancy(poly, kernel, n, limit),
        kappa3_expr=k3.commensurate_expr,
        kappa3_F=k3.kappa3_F,
        L=L.value,
        L_finite=L.finite,
        rate_class=cls.name,
        predicted_slope=cls.slope,
        c3_bound=c3_constant(model) if diff_order == 0 else math.nan,
        c4_bound=c4_constant(kernel, n),
        nonstat_bound=nonstat_discrepancy(model, n, i0, poly) if diff_order == 0 else math.nan,
    )


def bounds_table(
    poly: HermitePoly, model: ProcessModel, n_grid, normalization: str = "exact_variance"
) -> Tuple[BoundReport, ...]:
    return tuple(bound_report(poly, model, int(n), normalization) for n in n_grid)
