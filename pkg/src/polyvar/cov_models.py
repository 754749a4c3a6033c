"""
Exact autocovariance and cross-covariance kernels on integer lags.

Kernels covered:
    - fractional Gaussian noise (closed form)
    - stationary fractional Ornstein-Uhlenbeck (fOU) and the cross-covariance
      E[Z_0^m Z_t^m'] between two fOU processes driven by the same fBm
    - the stationary parts of the OUFOU pair (Z^{theta,rho}, Sigma^{theta,rho})
    - fOU of the second kind (FOU2)
    - user-tabulated kernels (CSV with columns lag, value)
    - p-th order finite differences of any of the above

All fOU-type values come from one exact one-dimensional representation. With
f_B the spectral density of fractional Gaussian noise, define

    G(m, t) = int_R f_B(l) e^{i l t} / (m - i l) dl
            = -H sgn(t) |t|^{2H-1} - (m/2)|t|^{2H} + (m^2/2) int_0^inf e^{-ms}|t+s|^{2H} ds

so that r_m(t) = (G(m,t) + G(m,-t)) / (2m) and
c(m, m', t) = (G(m,t) + G(m',-t)) / (m + m'). The integral is rewritten in
cancellation-free form before quadrature; the spectral integral is kept as an
independent route (method="spectral").
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, Optional

import numpy as np
import pandas as pd
from scipy import integrate
from scipy.linalg import eigvalsh, toeplitz
from scipy.special import betaln, gamma, hyp2f1

from .errors import (
    DegenerateParametersError,
    QuadratureError,
    UnsupportedRegimeError,
    ValidationError,
)

logger = logging.getLogger(__name__)

QUAD_LIMIT = 200
QUAD_EPSREL = 1e-11
LAPLACE_CUTOFF = 60.0
SERIES_SWITCH = 1e-4
HALF_TOL = 1e-4
EXP_DECAY_FLOOR = 1e-15

MODEL_VARIANTS = ("fgn", "fou", "oufou", "fou2", "tabulated")


# ---------------------------------------------------------------------------
# Kernel container
# ---------------------------------------------------------------------------


class CovKernel:
    """
    Stationary autocovariance r(k) on integer lags, tabulated lazily.

    `func` maps an array of nonnegative lags to covariance values. Values are
    memoized in a table that grows by doubling; kernels with exponential decay
    stop evaluating once |r| drops below EXP_DECAY_FLOOR * r(0) and are
    treated as zero beyond that lag.
    """

    def __init__(
        self,
        name: str,
        func: Callable[[np.ndarray], np.ndarray],
        params: Optional[Dict] = None,
        tail_exponent: Optional[float] = None,
        tail_constant: Optional[float] = None,
        exponential_decay: bool = False,
        finite_support: Optional[int] = None,
    ):
        self.name = name
        self.params = dict(params or {})
        self.tail_exponent = tail_exponent
        self.tail_constant = tail_constant
        self.exponential_decay = exponential_decay
        self.finite_support = finite_support
        self._func = func
        self._table = np.empty(0)
        self._zero_from: Optional[int] = None

    def __repr__(self):
        return f"CovKernel({self.name}, {self.params})"

    @property
    def r0(self) -> float:
        return float(self.values(0)[0])

    @property
    def max_tabulated_lag(self) -> int:
        return self._table.size - 1

    @property
    def bm_satisfied(self) -> bool:
        """Breuer-Major square-summability, decided from the tail exponent"""
        if self.tail_exponent is None:
            return True
        return self.tail_exponent > 0.5

    @property
    def metadata(self) -> Dict:
        return {
            "model": self.name,
            "params": self.params,
            "tail_exponent": self.tail_exponent,
            "max_tabulated_lag": self.max_tabulated_lag,
        }

    def _extend(self, max_lag: int) -> None:
        current = self._table.size
        if max_lag < current:
            return
        target = max(max_lag + 1, 2 * current, 16)
        if self.finite_support is not None:
            target = max(target, self.finite_support)
        lags = np.arange(current, target)
        if self._zero_from is not None:
            new = np.zeros(lags.size)
        elif self.finite_support is not None:
            new = np.zeros(lags.size)
            inside = lags < self.finite_support
            if inside.any():
                new[inside] = self._func(lags[inside])
        elif self.exponential_decay:
            new = self._extend_decaying(lags)
        else:
            new = np.asarray(self._func(lags), dtype=float)
        self._table = np.concatenate([self._table, new])
        logger.debug(f"{self.name}: tabulated lags up to {self._table.size - 1}")

    def _extend_decaying(self, lags: np.ndarray) -> np.ndarray:
        new = np.zeros(lags.size)
        floor = EXP_DECAY_FLOOR * (abs(self._table[0]) if self._table.size else 0.0)
        block = 32
        for start in range(0, lags.size, block):
            chunk = lags[start : start + block]
            vals = np.asarray(self._func(chunk), dtype=float)
            new[start : start + chunk.size] = vals
            if floor == 0.0:
                floor = EXP_DECAY_FLOOR * abs(vals[0])
            if chunk[0] > 0 and np.all(np.abs(vals) < floor):
                self._zero_from = int(chunk[0])
                logger.debug(f"{self.name}: |r| below floor from lag {chunk[0]}")
                break
        return new

    def values(self, max_lag: int) -> np.ndarray:
        """r(0), ..., r(max_lag)"""
        if max_lag < 0:
            raise ValidationError(f"max_lag must be nonnegative, got {max_lag}")
        self._extend(max_lag)
        return self._table[: max_lag + 1].copy()

    def __call__(self, lag):
        lags = np.abs(np.asarray(lag, dtype=int))
        table = self.values(int(lags.max()) if lags.size else 0)
        out = table[lags]
        return out if out.ndim else float(out)

    eval = __call__

    def toeplitz(self, n: int) -> np.ndarray:
        return toeplitz(self.values(n - 1))

    def min_eigenvalue(self, n: int) -> float:
        return float(eigvalsh(self.toeplitz(n), subset_by_index=[0, 0])[0])

    def to_csv(self, path: str, max_lag: int) -> None:
        pd.DataFrame(
            {"lag": np.arange(max_lag + 1), "value": self.values(max_lag)}
        ).to_csv(path, index=False)


# ---------------------------------------------------------------------------
# Fractional Gaussian noise
# ---------------------------------------------------------------------------


def _check_hurst(H: float) -> None:
    if not 0.0 < H < 1.0:
        raise ValidationError(f"Hurst parameter must lie in (0, 1), got {H}")

def _near_half(H: float) -> bool:
    """fOU quantities use their H = 1/2 closed forms within HALF_TOL"""
    return abs(H - 0.5) < HALF_TOL



def fgn_cov(H: float, sigma2: float, k):
    """(sigma2/2)(|k+1|^{2H} - 2|k|^{2H} + |k-1|^{2H})"""
    _check_hurst(H)
    if not sigma2 > 0:
        raise ValidationError(f"sigma2 must be positive, got {sigma2}")
    k = np.abs(np.asarray(k, dtype=float))
    two_h = 2.0 * H
    out = 0.5 * sigma2 * (
        np.abs(k + 1.0) ** two_h - 2.0 * k**two_h + np.abs(k - 1.0) ** two_h
    )
    return out if out.ndim else float(out)


@lru_cache(maxsize=None)
def fgn_kernel(H: float, sigma2: float = 1.0) -> CovKernel:
    _check_hurst(H)
    if H == 0.5:
        return CovKernel(
            "fgn",
            lambda lags: np.where(lags == 0, sigma2, 0.0),
            params={"H": H, "sigma2": sigma2},
            tail_exponent=math.inf,
            finite_support=1,
        )
    return CovKernel(
        "fgn",
        lambda lags: fgn_cov(H, sigma2, lags),
        params={"H": H, "sigma2": sigma2},
        tail_exponent=2.0 - 2.0 * H,
        tail_constant=sigma2 * H * abs(2.0 * H - 1.0),
    )


def white_kernel(sigma2: float = 1.0) -> CovKernel:
    return fgn_kernel(0.5, sigma2)


# ---------------------------------------------------------------------------
# fOU through the Laplace-type representation
# ---------------------------------------------------------------------------


def _bracket(x: float, H: float) -> float:
    """(1+x)^{2H} - 1 - 2Hx for x >= -1, without cancellation near 0"""
    a = 2.0 * H
    if abs(x) < SERIES_SWITCH:
        return x * x * (
            a * (a - 1.0) / 2.0
            + x * (a * (a - 1.0) * (a - 2.0) / 6.0)
            + x * x * (a * (a - 1.0) * (a - 2.0) * (a - 3.0) / 24.0)
        )
    if x <= -1.0:
        return a - 1.0
    return math.expm1(a * math.log1p(x)) - a * x


def _quad(func, lower, upper, what: str, **kwargs) -> float:
    value, abserr = integrate.quad(
        func,
        lower,
        upper,
        limit=QUAD_LIMIT,
        epsabs=0.0,
        epsrel=QUAD_EPSREL,
        **kwargs,
    )
    if not np.isfinite(value) or abserr > 1e-7 * abs(value) + 1e-300:
        raise QuadratureError(f"{what} did not converge", abserr)
    return value


def _laplace_scaled(H: float, T: float, sign: int) -> float:
    """
    g_sign(T) with G(m, sign * a) = m^{1-2H} g_sign(m * a), a > 0.
    """
    two_h = 2.0 * H
    if _near_half(H):
        return 0.0 if sign > 0 else math.exp(-T)
    if sign > 0:
        integral = _quad(
            lambda u: math.exp(-u) * _bracket(u / T, H),
            0.0,
            np.inf,
            "fOU Laplace integral (t > 0)",
        )
        return 0.5 * T**two_h * integral

    upper = min(T, LAPLACE_CUTOFF)
    integral = _quad(
        lambda u: math.exp(-u) * _bracket(-u / T, H),
        0.0,
        upper,
        "fOU Laplace integral (t < 0)",
    )
    if T < 700.0:
        e = math.exp(-T)
        integral += -e * (1.0 - two_h - two_h / T) + e * gamma(two_h + 1.0) * T**-two_h
    return 0.5 * T**two_h * integral


def laplace_g(m: float, H: float, t: float) -> float:
    """G(m, t) = int_R f_B(l) e^{i l t} / (m - i l) dl"""
    _check_hurst(H)
    if not m > 0:
        raise ValidationError(f"mean-reversion rate must be positive, got {m}")
    if t == 0:
        return H * gamma(2.0 * H) * m ** (1.0 - 2.0 * H)
    sign = 1 if t > 0 else -1
    return m ** (1.0 - 2.0 * H) * _laplace_scaled(H, m * abs(t), sign)


class _LaplaceTable:
    """G(m, k) and G(m, -k) on integer lags k >= 0, grown on demand"""

    def __init__(self, m: float, H: float):
        self.m = m
        self.H = H
        self.plus = np.empty(0)
        self.minus = np.empty(0)

    def extend(self, max_lag: int) -> None:
        start = self.plus.size
        if max_lag < start:
            return
        lags = np.arange(start, max_lag + 1)
        plus = np.array([laplace_g(self.m, self.H, float(k)) for k in lags])
        minus = np.array([laplace_g(self.m, self.H, -float(k)) for k in lags])
        self.plus = np.concatenate([self.plus, plus])
        self.minus = np.concatenate([self.minus, minus])

    def get(self, lags: np.ndarray):
        self.extend(int(np.max(lags)))
        return self.plus[lags], self.minus[lags]


@lru_cache(maxsize=None)
def _laplace_table(m: float, H: float) -> _LaplaceTable:
    return _LaplaceTable(m, H)


def _fbm_spectral_constant(H: float) -> float:
    return gamma(2.0 * H + 1.0) * math.sin(math.pi * H) / (2.0 * math.pi)


def _spectral_cross_cov(m: float, mp: float, H: float, t: float) -> float:
    """
    2 int_0^inf f_B(l) [(m m' + l^2) cos(l t) + (m - m') l sin(l t)]
        / ((m^2 + l^2)(m'^2 + l^2)) dl
    """
    const = _fbm_spectral_constant(H)
    a = abs(t)
    sgn = 1.0 if t > 0 else -1.0
    power = 1.0 - 2.0 * H

    def w_cos(lam):
        return (
            const
            * lam**power
            * (m * mp + lam * lam)
            / ((m * m + lam * lam) * (mp * mp + lam * lam))
        )

    def w_sin(lam):
        return (
            const * lam**power * (m - mp) * lam / ((m * m + lam * lam) * (mp * mp + lam * lam))
        )

    split = min(max(m, mp), math.pi / a)
    head = _quad(
        lambda lam: w_cos(lam) * math.cos(lam * a)
        + sgn * w_sin(lam) * math.sin(lam * a),
        0.0,
        split,
        "spectral head",
    )
    tail_cos, err_c = integrate.quad(
        w_cos, split, np.inf, weight="cos", wvar=a, epsabs=1e-13, limlst=200
    )
    tail_sin = 0.0
    err_s = 0.0
    if m != mp:
        tail_sin, err_s = integrate.quad(
            w_sin, split, np.inf, weight="sin", wvar=a, epsabs=1e-13, limlst=200
        )
    value = 2.0 * (head + tail_cos + sgn * tail_sin)
    if err_c + err_s > 1e-6 * abs(value) + 1e-14:
        raise QuadratureError("spectral oscillatory tail did not converge", err_c + err_s)
    return value


def fou_cross_cov(m: float, mp: float, H: float, t: float, method: str = "laplace") -> float:
    """E[Z_0^m Z_t^{m'}] for fOU processes with rates m, m' driven by one fBm"""
    _check_hurst(H)
    if not (m > 0 and mp > 0):
        raise ValidationError(f"rates must be positive, got {m}, {mp}")
    if t == 0:
        K = H * gamma(2.0 * H)
        return K * (m ** (1.0 - 2.0 * H) + mp ** (1.0 - 2.0 * H)) / (m + mp)
    if method == "spectral":
        if _near_half(H):
            return math.exp(-(mp if t > 0 else m) * abs(t)) / (m + mp)
        return _spectral_cross_cov(m, mp, H, t)
    if method != "laplace":
        raise ValidationError(f"unknown quadrature method '{method}'")
    return (laplace_g(m, H, t) + laplace_g(mp, H, -t)) / (m + mp)


def fou_cov(theta: float, H: float, t: float, method: str = "laplace") -> float:
    """Stationary fOU autocovariance r(t) = E[Z_0^theta Z_t^theta]"""
    if not theta > 0:
        raise ValidationError(f"theta must be positive, got {theta}")
    _check_hurst(H)
    if _near_half(H):
        return math.exp(-theta * abs(t)) / (2.0 * theta)
    return fou_cross_cov(theta, theta, H, abs(t), method=method)


@lru_cache(maxsize=None)
def fou_kernel(theta: float, H: float) -> CovKernel:
    if not theta > 0:
        raise ValidationError(f"theta must be positive, got {theta}")
    _check_hurst(H)
    if _near_half(H):
        return CovKernel(
            "fou",
            lambda lags: np.exp(-theta * lags) / (2.0 * theta),
            params={"theta": theta, "H": H},
            tail_exponent=math.inf,
            exponential_decay=True,
        )
    table = _laplace_table(theta, H)

    def func(lags):
        plus, minus = table.get(lags)
        return (plus + minus) / (2.0 * theta)

    return CovKernel(
        "fou",
        func,
        params={"theta": theta, "H": H},
        tail_exponent=2.0 - 2.0 * H,
        tail_constant=H * abs(2.0 * H - 1.0) / theta**2,
    )


# ---------------------------------------------------------------------------
# OUFOU pair
# ---------------------------------------------------------------------------


def _pair_cross(theta: float, rho: float, H: float, lags: np.ndarray) -> Dict[str, np.ndarray]:
    """c(a, b, k) for a, b in {theta, rho} at integer lags k >= 0"""
    lags = np.asarray(lags, dtype=int)
    if _near_half(H):
        k = lags.astype(float)
        tt = np.exp(-theta * k) / (2.0 * theta)
        rr = np.exp(-rho * k) / (2.0 * rho)
        return {
            "tt": tt,
            "rr": rr,
            "tr": np.exp(-rho * k) / (theta + rho),
            "rt": np.exp(-theta * k) / (theta + rho),
        }
    tp, tm = _laplace_table(theta, H).get(lags)
    rp, rm = _laplace_table(rho, H).get(lags)
    return {
        "tt": (tp + tm) / (2.0 * theta),
        "rr": (rp + rm) / (2.0 * rho),
        "tr": (tp + rm) / (theta + rho),
        "rt": (rp + tm) / (theta + rho),
    }


@dataclass
class OufouKernels:
    """Kernels of the stationary parts Z^{theta,rho} and Sigma^{theta,rho}"""

    theta: float
    rho: float
    H: float
    kZ: CovKernel
    kSigma: CovKernel
    etaX: float
    etaSigma: float

    def cross(self, lag) -> float:
        """E[Z_0^{theta,rho} Sigma_lag^{theta,rho}] for any integer lag"""
        lag = int(lag)
        th, rh = self.theta, self.rho
        c = _pair_cross(th, rh, self.H, np.array([abs(lag)]))
        c = {key: float(v[0]) for key, v in c.items()}
        if lag < 0:
            c["tr"], c["rt"] = c["rt"], c["tr"]
        return (rh * c["rt"] - rh * c["rr"] - th * c["tt"] + th * c["tr"]) / (rh - th) ** 2

    def cross_values(self, max_lag: int) -> np.ndarray:
        """cross(k) for k = -max_lag..max_lag"""
        lags = np.arange(max_lag + 1)
        th, rh = self.theta, self.rho
        c = _pair_cross(th, rh, self.H, lags)
        scale = (rh - th) ** 2
        pos = (rh * c["rt"] - rh * c["rr"] - th * c["tt"] + th * c["tr"]) / scale
        neg = (rh * c["tr"] - rh * c["rr"] - th * c["tt"] + th * c["rt"]) / scale
        return np.concatenate([neg[:0:-1], pos])

    def pair_matrices(self, max_lag: int) -> np.ndarray:
        """
        Gamma(k)[a, b] = E[Z^a_0 Z^b_k] for the driving pair (Z^theta, Z^rho),
        k = -max_lag..max_lag, shape (2 * max_lag + 1, 2, 2).
        """
        lags = np.arange(max_lag + 1)
        c = _pair_cross(self.theta, self.rho, self.H, lags)
        positive = np.stack(
            [np.stack([c["tt"], c["tr"]], axis=-1), np.stack([c["rt"], c["rr"]], axis=-1)],
            axis=-2,
        )
        # Gamma(-k) = Gamma(k)^T
        negative = np.swapaxes(positive[1:][::-1], 1, 2)
        return np.concatenate([negative, positive])


def oufou_eta(theta: float, rho: float, H: float):
    """Closed-form second moments (etaX, etaSigma) of the stationary OUFOU parts"""
    K = H * gamma(2.0 * H)
    denom = rho**2 - theta**2
    eta_x = K * (rho ** (2.0 - 2.0 * H) - theta ** (2.0 - 2.0 * H)) / denom
    eta_sigma = K * (theta ** (-2.0 * H) - rho ** (-2.0 * H)) / denom
    return eta_x, eta_sigma


@lru_cache(maxsize=None)
def oufou_kernels(theta: float, rho: float, H: float) -> OufouKernels:
    if not (theta > 0 and rho > 0):
        raise ValidationError(f"theta and rho must be positive, got {theta}, {rho}")
    if theta == rho:
        raise DegenerateParametersError("OUFOU requires theta != rho")
    _check_hurst(H)
    scale = (rho - theta) ** 2

    def k_z(lags):
        c = _pair_cross(theta, rho, H, lags)
        return (
            rho**2 * c["rr"] - rho * theta * (c["rt"] + c["tr"]) + theta**2 * c["tt"]
        ) / scale

    def k_sigma(lags):
        c = _pair_cross(theta, rho, H, lags)
        return (c["tt"] - c["tr"] - c["rt"] + c["rr"]) / scale

    exp_decay = _near_half(H)
    params = {"theta": theta, "rho": rho, "H": H}
    kz = CovKernel(
        "oufou_z",
        k_z,
        params=params,
        tail_exponent=math.inf if exp_decay else 4.0 - 2.0 * H,
        exponential_decay=exp_decay,
    )
    ks = CovKernel(
        "oufou_sigma",
        k_sigma,
        params=params,
        tail_exponent=math.inf if exp_decay else 2.0 - 2.0 * H,
        tail_constant=None
        if exp_decay
        else H * abs(2.0 * H - 1.0) * (1.0 / theta - 1.0 / rho) ** 2 / scale,
        exponential_decay=exp_decay,
    )
    eta_x, eta_sigma = oufou_eta(theta, rho, H)
    return OufouKernels(theta, rho, H, kz, ks, eta_x, eta_sigma)


# ---------------------------------------------------------------------------
# fOU of the second kind
# ---------------------------------------------------------------------------


def _check_fou2(alpha: float, H: float) -> None:
    if not 0.5 < H < 1.0:
        raise UnsupportedRegimeError(
            f"fOU of the second kind requires H in (1/2, 1), got {H}"
        )
    if not alpha > 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")


def fou2_variance(alpha: float, H: float) -> float:
    """(2H-1) H^{2H} / alpha * B(1 - H + alpha H, 2H - 1)"""
    _check_fou2(alpha, H)
    return math.exp(
        math.log(2.0 * H - 1.0)
        + 2.0 * H * math.log(H)
        - math.log(alpha)
        + betaln(1.0 - H + alpha * H, 2.0 * H - 1.0)
    )


def fou2_cov(alpha: float, H: float, t: float) -> float:
    """
    E[S_0^alpha S_t^alpha]. The double integral over [0, a_0] x [0, a_t]
    splits into the square [0, a_0]^2 (Beta closed form) plus a strip whose
    inner integral is a Gauss hypergeometric function; the strip is integrated
    over the time variable in log space.
    """
    _check_fou2(alpha, H)
    t = abs(t)
    r0 = fou2_variance(alpha, H)
    if t == 0:
        return r0
    beta = (alpha - 1.0) * H
    log_h = math.log(H)
    log_c = math.log(H) + math.log(2.0 * H - 1.0) + 2.0 * (1.0 - alpha) * H * log_h
    log_const = log_c - log_h + (beta + 1.0) * log_h - math.log(beta + 1.0)
    power = beta + 2.0 * H - 1.0

    def integrand(s):
        log_v = log_h + s / H
        z = math.exp(-s / H)
        f = hyp2f1(2.0 - 2.0 * H, beta + 1.0, beta + 2.0, z)
        return math.exp(log_const - alpha * t + power * log_v) * f

    strip = _quad(integrand, 0.0, t, "fOU second-kind strip integral")
    return r0 * math.exp(-alpha * t) + strip


@lru_cache(maxsize=None)
def fou2_kernel(alpha: float, H: float) -> CovKernel:
    _check_fou2(alpha, H)
    return CovKernel(
        "fou2",
        lambda lags: np.array([fou2_cov(alpha, H, float(k)) for k in lags]),
        params={"alpha": alpha, "H": H},
        tail_exponent=math.inf,
        exponential_decay=True,
    )


# ---------------------------------------------------------------------------
# Tabulated kernels and finite differences
# ---------------------------------------------------------------------------


def tabulated_kernel(
    values, tail_exponent: Optional[float] = None, name: str = "tabulated"
) -> CovKernel:
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size == 0 or not values[0] > 0:
        raise ValidationError("tabulated kernel needs r(0) > 0 and a 1-d table")
    if np.any(np.abs(values) > values[0] * (1.0 + 1e-12)):
        raise ValidationError("tabulated kernel violates |r(k)| <= r(0)")

    return CovKernel(
        name,
        lambda lags: values[lags],
        params={"n_lags": int(values.size)},
        tail_exponent=math.inf if tail_exponent is None else tail_exponent,
        finite_support=int(values.size),
    )


def load_tabulated_kernel(path: str, tail_exponent: Optional[float] = None) -> CovKernel:
    frame = pd.read_csv(path)
    if not {"lag", "value"} <= set(frame.columns):
        raise ValidationError(f"{path}: expected columns 'lag' and 'value'")
    frame = frame.sort_values("lag")
    lags = frame["lag"].to_numpy(dtype=int)
    if lags[0] != 0 or np.any(np.diff(lags) != 1):
        raise ValidationError(f"{path}: lags must be 0, 1, 2, ... without gaps")
    return tabulated_kernel(frame["value"].to_numpy(), tail_exponent, name="tabulated")


def _difference_weights(p: int) -> np.ndarray:
    """(-1)^j C(2p, p+j), j = -p..p"""
    j = np.arange(-p, p + 1)
    return np.array([(-1) ** abs(i) * math.comb(2 * p, p + i) for i in j], dtype=float)


def finite_diff_kernel(kernel: CovKernel, p: int) -> CovKernel:
    """Autocovariance of the p-th order forward differences of the sequence"""
    if p < 0:
        raise ValidationError(f"differencing order must be nonnegative, got {p}")
    if p == 0:
        return kernel
    weights = _difference_weights(p)

    def func(lags):
        base = kernel.values(int(np.max(lags)) + p)
        shifts = np.arange(-p, p + 1)
        idx = np.abs(lags[:, None] + shifts[None, :])
        return base[idx] @ weights

    alpha = kernel.tail_exponent
    tail_exponent = None if alpha is None else alpha + 2 * p
    tail_constant = None
    if kernel.tail_constant is not None and alpha is not None and math.isfinite(alpha):
        tail_constant = kernel.tail_constant * math.prod(alpha + i for i in range(2 * p))
    params = dict(kernel.params)
    params["diff_order"] = params.get("diff_order", 0) + p
    return CovKernel(
        kernel.name,
        func,
        params=params,
        tail_exponent=tail_exponent,
        tail_constant=tail_constant,
        exponential_decay=kernel.exponential_decay,
        finite_support=None
        if kernel.finite_support is None
        else kernel.finite_support + p,
    )


# ---------------------------------------------------------------------------
# Summability diagnostics
# ---------------------------------------------------------------------------


@dataclass
class SummabilityReport:
    u_f2_partial: float
    bm_satisfied: bool
    nmax: int
    consistency_eps: Optional[float]
    tail_exponent: Optional[float]
    tail_constant: Optional[float]
    _table: np.ndarray = field(repr=False, default=None)

    def tail_bound(self, n: int, k: int = 1) -> float:
        """sum_{|j| > n} r(j)^{2k}: exact inside the table plus an analytic tail"""
        r = self._table
        inside = 0.0
        if n + 1 < r.size:
            inside = 2.0 * float(np.sum(r[n + 1 :] ** (2 * k)))
        return inside + _analytic_tail(
            max(n, r.size - 1), k, self.tail_exponent, self.tail_constant, r
        )


def _analytic_tail(n, k, alpha, const, table) -> float:
    """2 C^{2k} n^{1 - 2k alpha} / (2k alpha - 1), integral bound past lag n"""
    if alpha is None or not math.isfinite(alpha):
        return 0.0
    s = 2 * k * alpha
    if s <= 1.0:
        return math.inf
    if const is None:
        last = abs(table[-1]) if table.size > 1 else 0.0
        const = last * (table.size - 1) ** alpha
    return 2.0 * const ** (2 * k) * n ** (1.0 - s) / (s - 1.0)


def summability_report(kernel: CovKernel, nmax: int) -> SummabilityReport:
    if nmax < 16:
        raise ValidationError(f"nmax must be at least 16, got {nmax}")
    r = kernel.values(nmax)
    u_partial = float(r[0] ** 2 + 2.0 * np.sum(r[1:] ** 2)) * 2.0
    partial_lt = float(r[0] ** 2 + 2.0 * np.sum(r[1:nmax] ** 2))

    alpha = kernel.tail_exponent
    eps = 1.0 - math.log(partial_lt) / math.log(nmax)
    if alpha is not None and alpha < 0.5:
        eps = min(eps, 2.0 * alpha)
    eps = min(eps, 1.0)
    return SummabilityReport(
        u_f2_partial=u_partial,
        bm_satisfied=kernel.bm_satisfied,
        nmax=nmax,
        consistency_eps=eps if eps > 0 else None,
        tail_exponent=alpha,
        tail_constant=kernel.tail_constant,
        _table=r,
    )


# ---------------------------------------------------------------------------
# Model descriptor
# ---------------------------------------------------------------------------


@dataclass
class ProcessModel:
    """
    Parametric model of the observed sequence.

    nonstat_gamma is the power of n in the non-stationary L^p discrepancy
    (1 for OU-type models started at zero, inf for stationary models);
    decay_rate is the exponential rate at which the correction term vanishes.
    """

    variant: str
    H: Optional[float] = None
    sigma2: float = 1.0
    theta: Optional[float] = None
    rho: Optional[float] = None
    alpha: Optional[float] = None
    table: Optional[np.ndarray] = field(default=None, repr=False)
    table_tail_exponent: Optional[float] = None

    def __post_init__(self):
        if self.variant not in MODEL_VARIANTS:
            raise ValidationError(
                f"unknown model '{self.variant}', expected one of {MODEL_VARIANTS}"
            )
        if self.variant != "tabulated":
            if self.H is None:
                raise ValidationError(f"model '{self.variant}' requires H")
            _check_hurst(self.H)
        if self.variant in ("fou", "oufou") and not (self.theta and self.theta > 0):
            raise ValidationError("theta must be positive")
        if self.variant == "oufou":
            if not (self.rho and self.rho > 0):
                raise ValidationError("rho must be positive")
            if self.theta == self.rho:
                raise DegenerateParametersError("OUFOU requires theta != rho")
        if self.variant == "fou2":
            _check_fou2(self.alpha if self.alpha is not None else -1.0, self.H)
        if self.variant == "fgn" and not self.sigma2 > 0:
            raise ValidationError("sigma2 must be positive")
        if self.variant == "tabulated" and self.table is None:
            raise ValidationError("tabulated model requires a table")

    @property
    def stationary(self) -> bool:
        return self.variant in ("fgn", "tabulated")

    @property
    def nonstat_gamma(self) -> float:
        return math.inf if self.stationary else 1.0

    @property
    def decay_rate(self) -> float:
        if self.variant == "fou":
            return self.theta
        if self.variant == "oufou":
            return min(self.theta, self.rho)
        if self.variant == "fou2":
            return self.alpha
        return math.inf

    @property
    def hurst(self) -> Optional[float]:
        return self.H

    def kernel(self) -> CovKernel:
        """Kernel of the stationary part of the observed sequence"""
        if self.variant == "fgn":
            return fgn_kernel(self.H, self.sigma2)
        if self.variant == "fou":
            return fou_kernel(self.theta, self.H)
        if self.variant == "oufou":
            return oufou_kernels(self.theta, self.rho, self.H).kZ
        if self.variant == "fou2":
            return fou2_kernel(self.alpha, self.H)
        return tabulated_kernel(self.table, self.table_tail_exponent)

    def companion_kernel(self) -> Optional[CovKernel]:
        if self.variant == "oufou":
            return oufou_kernels(self.theta, self.rho, self.H).kSigma
        return None

    def describe(self) -> Dict:
        out = {"variant": self.variant}
        for key in ("H", "sigma2", "theta", "rho", "alpha"):
            value = getattr(self, key)
            if value is not None and not (key == "sigma2" and self.variant != "fgn"):
                out[key] = value
        return out

    def label(self) -> str:
        parts = [f"{k}={v}" for k, v in self.describe().items() if k != "variant"]
        return f"{self.variant}({', '.join(parts)})"
