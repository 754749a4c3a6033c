"""
Hermite polynomials and Hermite-basis representations of even polynomials.

An even polynomial f_q of degree q is stored through its coefficients in the
basis H_{2k}(x / sqrt(r0)), k = 0..q/2, where r0 is the reference variance of
the Gaussian sequence the polynomial is applied to. With this scaling
E[f_q(Z_0)] is the zeroth coefficient whenever Var(Z_0) = r0.

Usage:
    from polyvar.hermite_basis import poly_to_hermite, lambda_target
    poly = poly_to_hermite([0.0, 0.0, 1.0], r0=2.0)  # x^2
    lam = lambda_target("power", 4, sigma2=1.0)       # 3.0
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln

from .errors import (
    DegreeCapError,
    InvalidDegreeError,
    UnsupportedPolynomialError,
    ValidationError,
)

logger = logging.getLogger(__name__)

MAX_DEGREE = 16

VARIATION_KINDS = ("hermite", "power")


def log_factorial(n):
    """log(n!) through the log-gamma function, elementwise"""
    return gammaln(np.asarray(n, dtype=float) + 1.0)


def log_binom(n, k):
    return log_factorial(n) - log_factorial(k) - log_factorial(np.asarray(n) - k)


def double_factorial_odd(m: int) -> int:
    """(2m-1)!! with the convention (-1)!! = 1"""
    return math.prod(range(1, 2 * m, 2))


def gaussian_moment(order: int, sigma2: float) -> float:
    """E[X^order] for X ~ N(0, sigma2)"""
    if order % 2:
        return 0.0
    return double_factorial_odd(order // 2) * sigma2 ** (order // 2)


def gaussian_abs_moment(order: int, sigma2: float) -> float:
    """E|X|^order for X ~ N(0, sigma2)"""
    if order == 0:
        return 1.0
    log_m = (
        0.5 * order * math.log(2.0 * sigma2)
        + gammaln((order + 1) / 2.0)
        - 0.5 * math.log(math.pi)
    )
    return math.exp(log_m)


def _check_degree(k: int, cap: int = MAX_DEGREE) -> None:
    if k < 0:
        raise InvalidDegreeError(f"degree must be nonnegative, got {k}")
    if k > cap:
        raise DegreeCapError(k, cap)


def _check_even_degree(q: int, cap: int = MAX_DEGREE) -> None:
    if q < 2 or q % 2:
        raise InvalidDegreeError(f"degree must be an even integer >= 2, got {q}")
    _check_degree(q, cap)


def hermite_eval(k: int, x, cap: int = MAX_DEGREE):
    """Probabilists' Hermite polynomial H_k evaluated at x (scalar or array)"""
    _check_degree(k, cap)
    x = np.asarray(x, dtype=float)
    h_prev = np.ones_like(x)
    if k == 0:
        return h_prev if h_prev.ndim else float(h_prev)
    h = x.copy()
    for j in range(1, k):
        h_prev, h = h, x * h - j * h_prev
    return h if h.ndim else float(h)


def hermite_monomial_coeffs(p: int, cap: int = MAX_DEGREE) -> np.ndarray:
    """
    Ascending monomial coefficients of H_p, built from
    a^p_{p-2k} = p! (-1)^k / (k! (p-2k)! 2^k).
    """
    _check_degree(p, cap)
    coeffs = np.zeros(p + 1)
    for k in range(p // 2 + 1):
        coeffs[p - 2 * k] = (
            math.factorial(p)
            * (-1) ** k
            / (math.factorial(k) * math.factorial(p - 2 * k) * 2**k)
        )
    return coeffs


def monomial_to_hermite(q: int, cap: int = MAX_DEGREE) -> np.ndarray:
    """Coefficients c[k] with x^q = sum_k c[k] H_{2k}(x)"""
    _check_even_degree(q, cap)
    half = q // 2
    return np.array(
        [
            math.factorial(q)
            / (2 ** (half - k) * math.factorial(half - k) * math.factorial(2 * k))
            for k in range(half + 1)
        ]
    )


@dataclass(frozen=True)
class HermitePoly:
    """
    Even polynomial f(x) = sum_k coeffs[k] * H_{2k}(x / sqrt(ref_var)).

    coeffs[k] is d_{f,2k}, the weight of H_{2k}(x / sqrt(r0)); degree is q = 2 * (len(coeffs) - 1).
    """

    degree: int
    coeffs: Tuple[float, ...]
    ref_var: float

    def __post_init__(self):
        _check_even_degree(self.degree)
        if len(self.coeffs) != self.degree // 2 + 1:
            raise ValidationError(
                f"expected {self.degree // 2 + 1} coefficients for degree "
                f"{self.degree}, got {len(self.coeffs)}"
            )
        if not self.ref_var > 0:
            raise ValidationError(f"ref_var must be positive, got {self.ref_var}")

    @property
    def d(self) -> np.ndarray:
        return np.asarray(self.coeffs, dtype=float)

    def __call__(self, x):
        y = np.asarray(x, dtype=float) / math.sqrt(self.ref_var)
        total = np.zeros_like(y)
        for k, dk in enumerate(self.coeffs):
            if dk != 0.0:
                total = total + dk * hermite_eval(2 * k, y)
        return total if total.ndim else float(total)

    def monomial_coeffs(self) -> np.ndarray:
        """Ascending monomial coefficients of the same polynomial"""
        out = np.zeros(self.degree + 1)
        for k, dk in enumerate(self.coeffs):
            h = hermite_monomial_coeffs(2 * k)
            scale = self.ref_var ** -(np.arange(2 * k + 1) / 2.0)
            out[: 2 * k + 1] += dk * h * scale
        return out

    def hermite_weights(self) -> np.ndarray:
        """d[k]^2 (2k)!, the chaos weights entering every variance formula"""
        k = np.arange(len(self.coeffs))
        return self.d**2 * np.exp(log_factorial(2 * k))

    def scaled(self, factor: float) -> "HermitePoly":
        return HermitePoly(
            self.degree, tuple(factor * c for c in self.coeffs), self.ref_var
        )


def poly_to_hermite(monomial_coeffs: Sequence[float], r0: float) -> HermitePoly:
    """
    Convert ascending monomial coefficients of an even polynomial into its
    Hermite representation scaled by r0.
    """
    if not r0 > 0:
        raise ValidationError(f"r0 must be positive, got {r0}")
    a = np.trim_zeros(np.asarray(monomial_coeffs, dtype=float), trim="b")
    if a.size == 0:
        raise UnsupportedPolynomialError("zero polynomial has no even degree")
    odd = a[1::2]
    if np.any(odd != 0.0):
        raise UnsupportedPolynomialError(
            "only even powers are supported, found odd-power terms"
        )
    q = a.size - 1
    _check_even_degree(q)

    d = np.zeros(q // 2 + 1)
    for j in range(1, q // 2 + 1):
        if a[2 * j] == 0.0:
            continue
        d[: j + 1] += a[2 * j] * r0**j * monomial_to_hermite(2 * j)
    d[0] += a[0]
    return HermitePoly(q, tuple(float(v) for v in d), float(r0))


def variation_poly(kind: str, q: int, sigma2: float) -> HermitePoly:
    """Hermite (H_q) or power (x^q) polynomial referenced to variance sigma2"""
    _check_even_degree(q)
    if kind == "hermite":
        return poly_to_hermite(hermite_monomial_coeffs(q), sigma2)
    if kind == "power":
        monomial = np.zeros(q + 1)
        monomial[q] = 1.0
        return poly_to_hermite(monomial, sigma2)
    raise ValidationError(f"unknown variation kind '{kind}', expected {VARIATION_KINDS}")


def central_moment_constant(q: int) -> float:
    """q! / ((q/2)! 2^{q/2}), the Gaussian moment constant (q-1)!!"""
    return float(double_factorial_odd(q // 2))


def lambda_target(
    kind: str, q: int, sigma2: float, poly: Optional[HermitePoly] = None
) -> float:
    """Population target E[f_q(Z_0)] for Z_0 ~ N(0, sigma2)"""
    if not sigma2 > 0:
        raise ValidationError(f"sigma2 must be positive, got {sigma2}")
    if kind == "general":
        if poly is None:
            raise ValidationError("kind='general' requires a HermitePoly")
        if math.isclose(poly.ref_var, sigma2, rel_tol=1e-14):
            return float(poly.coeffs[0])
        a = poly.monomial_coeffs()
        return float(
            sum(a[j] * gaussian_moment(j, sigma2) for j in range(0, a.size, 2))
        )

    _check_even_degree(q)
    c_q = central_moment_constant(q)
    if kind == "hermite":
        return c_q * (sigma2 - 1.0) ** (q // 2)
    if kind == "power":
        return c_q * sigma2 ** (q // 2)
    raise ValidationError(f"unknown target kind '{kind}'")
