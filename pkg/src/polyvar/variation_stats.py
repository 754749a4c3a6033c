"""
Polynomial-variation statistics and their exact moments.

For an even polynomial f_q and observations Z_0..Z_{n-1}:

    Q = (1/n) sum f_q(Z_i),   U = sqrt(n) (Q - lambda),   F = U / sqrt(E[U^2])

E[U^2], its n -> infinity limit u_{f_q} and the exact cumulants of the
quadratic statistic are evaluated from the covariance kernel, never from
simulation.

Usage:
    from polyvar.variation_stats import exact_var_U, quad_cumulants
    var_u = exact_var_U(poly, fgn_kernel(0.6), 512)
    cum = quad_cumulants(fgn_kernel(0.6), 4096)
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Optional, Union

import numpy as np
from scipy.linalg import matmul_toeplitz

from .cov_models import CovKernel
from .errors import ValidationError, WindowError
from .exact_sampler import SamplePath
from .hermite_basis import HermitePoly, poly_to_hermite

logger = logging.getLogger(__name__)

DENSE_TRACE_MAX_N = 512
TRACE_BATCH = 256
U_LIMIT_START = 1024
U_LIMIT_MAX_LAG = 2**22

PathLike = Union[SamplePath, np.ndarray]


def _values(path: PathLike) -> np.ndarray:
    values = path.values if isinstance(path, SamplePath) else np.asarray(path, float)
    if values.size < 1:
        raise ValidationError("path must contain at least one value")
    return values


def align_poly(poly: HermitePoly, r0: float) -> HermitePoly:
    """Re-expand poly in the Hermite basis scaled by the kernel variance r0"""
    if math.isclose(poly.ref_var, r0, rel_tol=1e-14):
        return poly
    return poly_to_hermite(poly.monomial_coeffs(), r0)


def _chaos_weights(poly: HermitePoly) -> np.ndarray:
    """d[k]^2 (2k)! for k = 1..q/2; the constant term never enters U"""
    return poly.hermite_weights()[1:]


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def q_variation(path: PathLike, poly: HermitePoly) -> float:
    """Q = (1/n) sum_i f_q(Z_i)"""
    return float(np.mean(poly(_values(path))))


def trimmed_variation(
    path: PathLike, poly: HermitePoly, i0: int, n_prime: Optional[int] = None
) -> float:
    """(1/n') sum_{i=i0}^{i0+n'-1} f_q(Z_i); n' defaults to everything after i0"""
    values = _values(path)
    if i0 < 0:
        raise WindowError(f"i0 must be nonnegative, got {i0}")
    if n_prime is None:
        n_prime = values.size - i0
    if n_prime < 1 or i0 + n_prime > values.size:
        raise WindowError(
            f"window [{i0}, {i0 + n_prime}) does not fit a path of length {values.size}"
        )
    return float(np.mean(poly(values[i0 : i0 + n_prime])))


def finite_diff_path(path: SamplePath, p: int) -> SamplePath:
    """p-th order forward differences Z^{(p)}_k, length n - p"""
    if p < 0:
        raise ValidationError(f"differencing order must be nonnegative, got {p}")
    if path.values.size <= p:
        raise WindowError(f"cannot difference a path of length {path.values.size} {p} times")
    if p == 0:
        return path
    companion = None
    if path.companion is not None:
        companion = np.diff(path.companion, n=p)
    return replace(
        path,
        values=np.diff(path.values, n=p),
        companion=companion,
        diff_order=path.diff_order + p,
        parts={},
    )


def u_statistic(q_value: float, lam: float, n: int) -> float:
    return math.sqrt(n) * (q_value - lam)


# ---------------------------------------------------------------------------
# Exact second moments
# ---------------------------------------------------------------------------


def exact_var_U(poly: HermitePoly, kernel: CovKernel, n: int) -> float:
    """
    E[U^2] = sum_k d_k^2 (2k)! (1 + 2 sum_{j=1}^{n-1} (1 - j/n) (r(j)/r(0))^{2k})
    """
    if n < 1:
        raise ValidationError(f"n must be positive, got {n}")
    r = kernel.values(n - 1)
    poly = align_poly(poly, r[0])
    rho = r[1:] / r[0]
    taper = 1.0 - np.arange(1, n) / n
    total = 0.0
    for k, w in enumerate(_chaos_weights(poly), start=1):
        if w == 0.0:
            continue
        total += w * (1.0 + 2.0 * float(np.sum(taper * rho ** (2 * k))))
    return total


@dataclass
class ULimitResult:
    """u_{f_q}; `diverges` is set instead of raising when Breuer-Major fails"""

    value: float
    diverges: bool
    nmax: int
    tail_estimate: float
    lag_sums: Dict[int, float] = field(default_factory=dict, repr=False)

    def __float__(self):
        return self.value


def _midpoint_tail(N: int, k: int, alpha: float, const: float) -> float:
    """sum_{j>N} (const j^{-alpha})^{2k} approximated by the integral from N + 1/2"""
    s = 2 * k * alpha
    return const ** (2 * k) * (N + 0.5) ** (1.0 - s) / (s - 1.0)


def _power_lag_sums(
    poly: HermitePoly, kernel: CovKernel, tol: float
) -> ULimitResult:
    """S_k = sum_{j>=1} rho_j^{2k} for every k with nonzero weight"""
    weights = _chaos_weights(poly)
    ks = [k for k, w in enumerate(weights, start=1) if w != 0.0]
    alpha = kernel.tail_exponent
    finite_tail = alpha is not None and math.isfinite(alpha)
    if not kernel.bm_satisfied:
        return ULimitResult(math.inf, True, 0, math.inf)

    N = U_LIMIT_START
    previous = None
    while True:
        r = kernel.values(N)
        rho = r[1:] / r[0]
        sums = {}
        tail_total = 0.0
        for k in ks:
            tail = 0.0
            if finite_tail:
                const = kernel.tail_constant
                if const is None:
                    const = abs(r[-1]) * N**alpha
                tail = _midpoint_tail(N, k, alpha, const / r[0])
            sums[k] = float(np.sum(rho ** (2 * k))) + tail
            tail_total += weights[k - 1] * 2.0 * tail
        value = float(sum(w * (1.0 + 2.0 * sums.get(k, 0.0)) for k, w in enumerate(weights, 1)))
        if previous is not None and abs(value - previous) < tol * max(1.0, abs(value)):
            return ULimitResult(value, False, N, tail_total, sums)
        if 2 * N > U_LIMIT_MAX_LAG:
            logger.warning(
                f"u-limit for {kernel.name} not settled at lag {N}: "
                f"last change {abs(value - previous):.3e}"
            )
            return ULimitResult(value, False, N, tail_total, sums)
        previous = value
        N *= 2


def u_limit(poly: HermitePoly, kernel: CovKernel, tol: float = 1e-10) -> ULimitResult:
    """
    u_{f_q} = sum_k d_k^2 (2k)! sum_{j in Z} (r(j)/r(0))^{2k}, lag sums extended
    until successive doublings agree to tol, with the power-law tail added.
    """
    poly = align_poly(poly, kernel.r0)
    result = _power_lag_sums(poly, kernel, tol)
    if result.diverges:
        logger.info(f"{kernel.name}: Breuer-Major condition fails, u-limit diverges")
    return result


def variance_discrepancy(
    poly: HermitePoly, kernel: CovKernel, n: int, limit: Optional[ULimitResult] = None
) -> float:
    """
    |1 - E[U^2]/u| from the tail expression
    (1/u) sum_k d_k^2 (2k)! [2 sum_{j>=n} rho_j^{2k} + (2/n) sum_{j=1}^{n-1} j rho_j^{2k}]
    """
    poly = align_poly(poly, kernel.r0)
    if limit is None:
        limit = _power_lag_sums(poly, kernel, 1e-12)
    if limit.diverges:
        return math.inf
    r = kernel.values(max(n - 1, 0))
    rho = r[1:] / r[0]
    j = np.arange(1, n)
    total = 0.0
    for k, w in enumerate(_chaos_weights(poly), start=1):
        if w == 0.0:
            continue
        head = rho ** (2 * k)
        beyond = limit.lag_sums[k] - float(np.sum(head))
        total += w * (2.0 * beyond + 2.0 / n * float(np.sum(j * head)))
    return total / limit.value


# ---------------------------------------------------------------------------
# Cumulants of the quadratic statistic
# ---------------------------------------------------------------------------


@dataclass
class CumulantReport:
    n: int
    kappa2: float
    kappa3: float
    kappa4: float

    @property
    def kappa3_F(self) -> float:
        return self.kappa3 / self.kappa2**1.5

    @property
    def kappa4_F(self) -> float:
        return self.kappa4 / self.kappa2**2

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["kappa3_F"] = self.kappa3_F
        out["kappa4_F"] = self.kappa4_F
        return out


def toeplitz_traces(r: np.ndarray, dense_max: int = DENSE_TRACE_MAX_N):
    """tr(R^2), tr(R^3), tr(R^4) for the symmetric Toeplitz matrix with first column r"""
    n = r.size
    lags = np.arange(1, n)
    tr2 = float(n * r[0] ** 2 + 2.0 * np.sum((n - lags) * r[1:] ** 2))
    if n <= dense_max:
        R = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
        R = r[R]
        R2 = R @ R
        return tr2, float(np.sum(R2 * R)), float(np.sum(R2 * R2))

    tr3 = 0.0
    tr4 = 0.0
    idx = np.arange(n)
    for start in range(0, n, TRACE_BATCH):
        cols = idx[start : start + TRACE_BATCH]
        block = r[np.abs(idx[:, None] - cols[None, :])]
        # columns of R^2 via FFT Toeplitz products
        r2_block = matmul_toeplitz((r, r), block)
        tr3 += float(np.sum(r2_block * block))
        tr4 += float(np.sum(r2_block * r2_block))
    return tr2, tr3, tr4


def quad_cumulants(kernel: CovKernel, n: int) -> CumulantReport:
    """
    Exact cumulants of U = sqrt(n)(Q - r(0)) for f_2(x) = x^2:
    kappa_m = 2^{m-1} (m-1)! tr(R^m) / n^{m/2}.
    """
    if n < 1:
        raise ValidationError(f"n must be positive, got {n}")
    r = kernel.values(n - 1)
    tr2, tr3, tr4 = toeplitz_traces(r)
    logger.debug(f"{kernel.name}: traces at n={n}: {tr2:.6g}, {tr3:.6g}, {tr4:.6g}")
    return CumulantReport(
        n=n,
        kappa2=2.0 * tr2 / n,
        kappa3=8.0 * tr3 / n**1.5,
        kappa4=48.0 * tr4 / n**2,
    )


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class VariationReport:
    n: int
    Q: float
    lam: float
    U: float
    var_U_exact: float
    u_limit: float
    u_limit_diverges: bool
    kappa2: float
    kappa3: float
    kappa4: float
    F: float
    kappa3_F: float
    kappa4_F: float

    def to_dict(self) -> Dict:
        return {
            key: (None if isinstance(v, float) and not math.isfinite(v) else v)
            for key, v in asdict(self).items()
        }

    def to_json(self, path: Optional[str] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text


def variation_report(
    path: PathLike, poly: HermitePoly, kernel: CovKernel, lam: float
) -> VariationReport:
    """Q, U and F of an observed path plus the exact moments they are judged against"""
    values = _values(path)
    n = values.size
    q_value = q_variation(values, poly)
    u_value = u_statistic(q_value, lam, n)
    var_u = exact_var_U(poly, kernel, n)
    limit = u_limit(poly, kernel)
    cum = quad_cumulants(kernel, n)
    return VariationReport(
        n=n,
        Q=q_value,
        lam=lam,
        U=u_value,
        var_U_exact=var_u,
        u_limit=limit.value,
        u_limit_diverges=limit.diverges,
        kappa2=cum.kappa2,
        kappa3=cum.kappa3,
        kappa4=cum.kappa4,
        F=u_value / math.sqrt(var_u),
        kappa3_F=cum.kappa3_F,
        kappa4_F=cum.kappa4_F,
    )
