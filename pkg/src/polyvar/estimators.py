"""
Moment-map estimators for the drift parameters of fOU-type models.

Each estimator inverts a population moment map at an observed polynomial
variation:

    fOU        theta  = mu^{-1}(Q(X)),     mu(theta) = lambda(H Gamma(2H) theta^{-2H})
    OUFOU      (theta, rho) = delta^{-1}(Q(X), Q(Sigma))
    fOU2       alpha  = nu^{-1}(Q(S)),     nu(alpha) = lambda(r_{S^alpha}(0))
    fOU diff   theta  = branch of the first-difference map

and reports a delta-method variance. H is always taken as known.

Usage:
    from polyvar.estimators import invert_mu_fou, invert_delta_oufou
    est = invert_mu_fou("hermite", 2, 0.65, observed=-0.31)
    pair = invert_delta_oufou(0.6, (eta_x, eta_sigma))
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize_scalar, root_scalar
from scipy.special import digamma, gamma
from scipy.stats import norm

from .cov_models import (
    finite_diff_kernel,
    fgn_kernel,
    fou2_kernel,
    fou2_variance,
    fou_cov,
    fou_kernel,
    oufou_eta,
    oufou_kernels,
)
from .errors import (
    BranchError,
    DegenerateParametersError,
    DivergenceError,
    InversionError,
    RangeError,
    UnsupportedRegimeError,
    ValidationError,
)
from .exact_sampler import SamplePath
from .hermite_basis import (
    VARIATION_KINDS,
    _check_even_degree,
    central_moment_constant,
    lambda_target,
    variation_poly,
)
from .rate_bounds import log_variance_asymptote
from .variation_stats import finite_diff_path, trimmed_variation, u_limit

logger = logging.getLogger(__name__)

RESIDUAL_RTOL = 1e-10
LOG_PARAM_RANGE = (-25.0, 25.0)
FD_THETA_RANGE = (1e-4, 60.0)
FD_MODES = ("literal", "variance", "numeric")
BRANCHES = ("left", "right")
NEWTON_MAX_ITER = 100
NEAR_DIAGONAL = 1e-3
# brentq rejects rtol below 4 eps
BRENT_RTOL = 4.0 * np.finfo(float).eps
Z95 = float(norm.ppf(0.975))

Estimate = Union[float, Tuple[float, float]]


@dataclass
class EstimateResult:
    """
    Parameter estimate with its delta-method variance.

    asymptotic_variance is the variance of the estimate itself (already
    divided by n), a scalar or a 2x2 matrix.
    """

    estimate: Estimate
    asymptotic_variance: Optional[Union[float, np.ndarray]] = None
    std_error: Optional[Union[float, Tuple[float, float]]] = None
    ci95: Optional[Union[Tuple[float, float], Tuple[Tuple[float, float], ...]]] = None
    diagnostics: Dict = field(default_factory=dict)

    def with_variance(self, variance) -> "EstimateResult":
        if np.ndim(variance) == 0:
            se = math.sqrt(float(variance))
            est = float(self.estimate)
            self.ci95 = (est - Z95 * se, est + Z95 * se)
            self.asymptotic_variance = float(variance)
            self.std_error = se
            return self
        variance = np.asarray(variance, dtype=float)
        se = tuple(float(s) for s in np.sqrt(np.diag(variance)))
        self.asymptotic_variance = variance
        self.std_error = se
        self.ci95 = tuple(
            (e - Z95 * s, e + Z95 * s) for e, s in zip(self.estimate, se)
        )
        return self

    def to_dict(self) -> Dict:
        variance = self.asymptotic_variance
        if isinstance(variance, np.ndarray):
            variance = variance.tolist()
        return {
            "estimate": self.estimate,
            "asymptotic_variance": variance,
            "std_error": self.std_error,
            "ci95": self.ci95,
            "diagnostics": self.diagnostics,
        }


def _fou_constant(H: float) -> float:
    return H * gamma(2.0 * H)


def _check_kind(kind: str) -> None:
    if kind not in VARIATION_KINDS:
        raise ValidationError(f"unknown variation kind '{kind}', expected {VARIATION_KINDS}")


def _check_residual(value: float, observed: float, what: str) -> float:
    residual = abs(value - observed)
    if not residual <= RESIDUAL_RTOL * (1.0 + abs(observed)):
        raise InversionError(f"{what} did not reach the residual tolerance", residual)
    return residual


# ---------------------------------------------------------------------------
# Targets as functions of the variance
# ---------------------------------------------------------------------------


def lambda_derivative(kind: str, q: int, sigma2: float) -> float:
    """d lambda / d sigma2"""
    _check_kind(kind)
    c_q = central_moment_constant(q)
    base = sigma2 - 1.0 if kind == "hermite" else sigma2
    return c_q * (q / 2) * base ** (q // 2 - 1)


def lambda_range(kind: str, q: int) -> Tuple[float, float]:
    """Range of the target over sigma2 > 0 (upper branch for even q/2 Hermite)"""
    _check_kind(kind)
    if kind == "hermite" and (q // 2) % 2 == 1:
        return (-central_moment_constant(q), math.inf)
    return (0.0, math.inf)


def invert_lambda_target(
    kind: str, q: int, observed: float, branch: str = "upper"
) -> float:
    """
    sigma2 with lambda_target(kind, q, sigma2) = observed.

    For the Hermite kind with q/2 even the target is not monotone in sigma2;
    `branch` picks sigma2 > 1 ("upper") or sigma2 < 1 ("lower").
    """
    _check_kind(kind)
    _check_even_degree(q)
    half = q // 2
    ratio = observed / central_moment_constant(q)
    if kind == "power":
        if not ratio > 0:
            raise RangeError("power-variation target must be positive", (0.0, math.inf))
        return ratio ** (1.0 / half)
    if half % 2 == 1:
        shift = math.copysign(abs(ratio) ** (1.0 / half), ratio)
        if not shift > -1.0:
            raise RangeError("Hermite target below its infimum", lambda_range(kind, q))
        return 1.0 + shift
    if not ratio >= 0:
        raise RangeError("even Hermite target must be nonnegative", (0.0, math.inf))
    shift = ratio ** (1.0 / half)
    if branch == "upper":
        return 1.0 + shift
    if branch == "lower":
        if not shift < 1.0:
            raise RangeError("lower branch needs target below c_q", (0.0, central_moment_constant(q)))
        return 1.0 - shift
    raise BranchError(f"unknown branch '{branch}', expected 'upper' or 'lower'")


# ---------------------------------------------------------------------------
# Shared monotone inversion
# ---------------------------------------------------------------------------


def _brentq(
    func: Callable[[float], float], bracket: Tuple[float, float], what: str, xtol: float = 1e-14
):
    try:
        sol = root_scalar(
            func, method="brentq", bracket=bracket, xtol=xtol, rtol=BRENT_RTOL, maxiter=200
        )
    except ValueError as exc:
        raise InversionError(f"{what}: {exc}", float("nan")) from exc
    if not sol.converged:
        raise InversionError(f"{what}: bracketing failed ({sol.flag})", abs(func(sol.root)))
    return sol


def _expand_bracket(func: Callable[[float], float], lo: float, hi: float):
    """Widen [lo, hi] in log space until func changes sign"""
    f_lo, f_hi = func(lo), func(hi)
    while f_lo * f_hi > 0:
        if lo <= LOG_PARAM_RANGE[0] and hi >= LOG_PARAM_RANGE[1]:
            return None
        lo = max(lo - 2.0 * (hi - lo), LOG_PARAM_RANGE[0])
        hi = min(hi + 2.0 * (hi - lo), LOG_PARAM_RANGE[1])
        f_lo, f_hi = func(lo), func(hi)
    return lo, hi


def invert_monotone(
    forward: Callable[[float], float],
    observed: float,
    log_bracket: Tuple[float, float] = (-2.0, 2.0),
    derivative: Optional[Callable[[float], float]] = None,
    what: str = "moment map",
) -> Tuple[float, Dict]:
    """
    Solve forward(x) = observed for x > 0 by Brent's method in log x, then
    polish with Newton steps when a derivative is available.
    """

    def gap(s):
        return forward(math.exp(s)) - observed

    bracket = _expand_bracket(gap, *log_bracket)
    if bracket is None:
        lo = forward(math.exp(LOG_PARAM_RANGE[1]))
        hi = forward(math.exp(LOG_PARAM_RANGE[0]))
        raise RangeError(f"{what}: observed {observed} not attained", (min(lo, hi), max(lo, hi)))
    sol = _brentq(gap, bracket, what)
    x = math.exp(sol.root)
    iterations = sol.iterations
    residual = abs(forward(x) - observed)
    if derivative is not None:
        for _ in range(3):
            slope = derivative(x)
            if slope == 0 or not math.isfinite(slope):
                break
            candidate = x - (forward(x) - observed) / slope
            if not candidate > 0:
                break
            cand_residual = abs(forward(candidate) - observed)
            if cand_residual >= residual:
                break
            x, residual = candidate, cand_residual
            iterations += 1
    return x, {"iterations": iterations, "residual": residual}


# ---------------------------------------------------------------------------
# fOU
# ---------------------------------------------------------------------------


def fou_variance(H: float, theta: float) -> float:
    """r_{Z^theta}(0) = H Gamma(2H) theta^{-2H}"""
    if not theta > 0:
        raise ValidationError(f"theta must be positive, got {theta}")
    if not 0.0 < H < 1.0:
        raise ValidationError(f"Hurst parameter must lie in (0, 1), got {H}")
    return _fou_constant(H) * theta ** (-2.0 * H)


def mu_fou(kind: str, q: int, H: float, theta: float) -> float:
    """lambda_{f_q}(Z^theta)"""
    _check_kind(kind)
    return lambda_target(kind, q, fou_variance(H, theta))


def mu_fou_derivative(kind: str, q: int, H: float, theta: float) -> float:
    v = fou_variance(H, theta)
    return lambda_derivative(kind, q, v) * (-2.0 * H * v / theta)


def hermite_theta_bound(H: float) -> float:
    """theta_0 = (H Gamma(2H))^{1/(2H)}, where the fOU variance equals one"""
    return _fou_constant(H) ** (1.0 / (2.0 * H))


def invert_mu_fou(
    kind: str,
    q: int,
    H: float,
    observed: float,
    clamp: bool = False,
    literal_form: bool = False,
    method: str = "closed_form",
) -> EstimateResult:
    """
    theta-hat = mu^{-1}(observed) on theta > 0; the Hermite kind with q/2 even
    is restricted to theta < theta_0, where mu is strictly decreasing.

    literal_form evaluates the closed inverse with K^{-1/(2H)} in front for
    (hermite, 2) as written; it is not an inverse of mu and skips the
    residual check.
    """
    _check_kind(kind)
    _check_even_degree(q)
    lo, hi = lambda_range(kind, q)
    diagnostics: Dict = {"method": method, "clamped": False}
    if not lo < observed < hi:
        if not clamp:
            raise RangeError(f"observed {observed} outside the range of mu", (lo, hi))
        clamped = lo + 1e-9 * (1.0 + abs(lo))
        logger.warning(f"clamping observed {observed} to {clamped} inside ({lo}, {hi})")
        diagnostics.update(clamped=True, original_observed=observed)
        observed = clamped

    K = _fou_constant(H)
    if literal_form:
        if (kind, q) != ("hermite", 2):
            raise ValidationError("literal_form applies to the quadratic Hermite case only")
        theta = K ** (-1.0 / (2.0 * H)) * (1.0 + observed) ** (-1.0 / (2.0 * H))
        diagnostics.update(method="literal_form", residual=abs(mu_fou(kind, q, H, theta) - observed))
        return EstimateResult(theta, diagnostics=diagnostics)

    if method == "closed_form":
        sigma2 = invert_lambda_target(kind, q, observed, branch="upper")
        theta = (K / sigma2) ** (1.0 / (2.0 * H))
        diagnostics["iterations"] = 0
    elif method == "bisection":
        upper = 0.0
        if kind == "hermite" and (q // 2) % 2 == 0:
            upper = math.log(hermite_theta_bound(H))
        theta, info = invert_monotone(
            lambda t: mu_fou(kind, q, H, t),
            observed,
            log_bracket=(upper - 2.0, upper),
            derivative=lambda t: mu_fou_derivative(kind, q, H, t),
            what="fOU moment map",
        )
        diagnostics.update(info)
    else:
        raise ValidationError(f"unknown inversion method '{method}'")
    diagnostics["residual"] = _check_residual(
        mu_fou(kind, q, H, theta), observed, "fOU moment map inversion"
    )
    return EstimateResult(theta, diagnostics=diagnostics)


def fou_estimator_variance(kind: str, q: int, H: float, theta: float, n: int) -> float:
    """
    Var(theta-hat) = u_{f_q}(Z^theta) / (n mu'(theta)^2); at H = 3/4 the
    logarithmic regime 9 d_2^2 / (16 theta^4 r0^2 mu'^2) log(n)/n is returned.
    """
    kernel = fou_kernel(theta, H)
    poly = variation_poly(kind, q, kernel.r0)
    slope = mu_fou_derivative(kind, q, H, theta)
    if abs(H - 0.75) <= 1e-12:
        tail_constant = H * (2.0 * H - 1.0) / theta**2
        return log_variance_asymptote(poly, tail_constant, n) / (n * slope**2)
    if H > 0.75:
        raise DivergenceError(f"fOU estimator is not asymptotically normal for H={H} > 3/4")
    limit = u_limit(poly, kernel)
    return delta_method_variance(1.0 / slope, limit.value, n)


# ---------------------------------------------------------------------------
# fOU after one finite difference
# ---------------------------------------------------------------------------


def _check_fd_mode(mode: str) -> None:
    if mode not in FD_MODES:
        raise ValidationError(f"unknown mode '{mode}', expected one of {FD_MODES}")


def mu_fd_fou(H: float, theta: float, mode: str = "literal") -> float:
    """
    Target of the quadratic Hermite variation of the first differences.

    literal:  (e^theta / (2 + e^{-2theta})) (K theta^{-2H} - 1)
    variance: (e^theta / (2 + e^{-2theta})) K theta^{-2H} - 1
    numeric:  2 r(0) - 2 r(1) - 1 from the exact fOU kernel
    """
    _check_fd_mode(mode)
    if mode == "numeric":
        return 2.0 * (fou_cov(theta, H, 0.0) - fou_cov(theta, H, 1.0)) - 1.0
    factor = math.exp(theta) / (2.0 + math.exp(-2.0 * theta))
    v = fou_variance(H, theta)
    if mode == "literal":
        return factor * (v - 1.0)
    return factor * v - 1.0


def _fd_minimum(H: float, mode: str) -> Tuple[float, float, bool]:
    """(theta_min, map value there, whether the minimum is interior)"""
    lo, hi = (math.log(t) for t in FD_THETA_RANGE)
    res = minimize_scalar(
        lambda s: mu_fd_fou(H, math.exp(s), mode),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-12},
    )
    interior = lo + 1e-6 < res.x < hi - 1e-6
    return math.exp(res.x), float(res.fun), interior


def invert_mu_fd_fou(
    H: float, observed: float, branch: Optional[str] = None, mode: str = "literal"
) -> EstimateResult:
    """
    theta-hat on the chosen side of theta_min. The branch is mandatory: the map
    is not injective and the data cannot tell which side theta lies on.
    """
    _check_fd_mode(mode)
    if branch not in BRANCHES:
        raise BranchError(f"branch must be one of {BRANCHES}, got {branch!r}")
    theta_min, f_min, interior = _fd_minimum(H, mode)
    lo, hi = FD_THETA_RANGE
    if branch == "left":
        interval = (lo, theta_min)
    else:
        if not interior:
            raise RangeError(
                f"map has no interior minimum in mode '{mode}', right branch is empty",
                (f_min, f_min),
            )
        interval = (theta_min, hi)
    f_ends = (mu_fd_fou(H, interval[0], mode), mu_fd_fou(H, interval[1], mode))
    low_val, high_val = min(f_ends), max(f_ends)
    if not low_val <= observed <= high_val:
        raise RangeError(f"observed {observed} not attained on the {branch} branch", (low_val, high_val))

    sol = _brentq(
        lambda s: mu_fd_fou(H, math.exp(s), mode) - observed,
        (math.log(interval[0]), math.log(interval[1])),
        "first-difference map inversion",
    )
    theta = math.exp(sol.root)
    residual = _check_residual(
        mu_fd_fou(H, theta, mode), observed, "first-difference map inversion"
    )
    return EstimateResult(
        theta,
        diagnostics={
            "branch": branch,
            "mode": mode,
            "theta_min": theta_min,
            "map_min": f_min,
            "iterations": sol.iterations,
            "residual": residual,
        },
    )


def mu_fd_derivative(H: float, theta: float, mode: str = "literal", rel_step: float = 1e-5) -> float:
    h = rel_step * theta
    return (mu_fd_fou(H, theta + h, mode) - mu_fd_fou(H, theta - h, mode)) / (2.0 * h)


# ---------------------------------------------------------------------------
# fOU of the second kind
# ---------------------------------------------------------------------------


def nu_fou2(kind: str, q: int, H: float, alpha: float) -> float:
    _check_kind(kind)
    return lambda_target(kind, q, fou2_variance(alpha, H))


def fou2_variance_derivative(alpha: float, H: float) -> float:
    """d/d alpha of (2H-1) H^{2H} / alpha * B(1 - H + alpha H, 2H - 1)"""
    a = 1.0 - H + alpha * H
    log_slope = -1.0 / alpha + H * (digamma(a) - digamma(a + 2.0 * H - 1.0))
    return fou2_variance(alpha, H) * log_slope


def nu_fou2_derivative(kind: str, q: int, H: float, alpha: float) -> float:
    v = fou2_variance(alpha, H)
    return lambda_derivative(kind, q, v) * fou2_variance_derivative(alpha, H)


def invert_nu_fou2(kind: str, q: int, H: float, observed: float) -> EstimateResult:
    _check_kind(kind)
    _check_even_degree(q)
    if not 0.5 < H < 1.0:
        raise UnsupportedRegimeError(f"fOU of the second kind requires H in (1/2, 1), got {H}")
    lo, hi = lambda_range(kind, q)
    if not lo < observed < hi:
        raise RangeError(f"observed {observed} outside the range of nu", (lo, hi))
    sigma2 = invert_lambda_target(kind, q, observed, branch="upper")
    alpha, info = invert_monotone(
        lambda a: math.log(fou2_variance(a, H)),
        math.log(sigma2),
        log_bracket=(-2.0, 2.0),
        derivative=lambda a: fou2_variance_derivative(a, H) / fou2_variance(a, H),
        what="second-kind variance map",
    )
    info["residual"] = _check_residual(
        nu_fou2(kind, q, H, alpha), observed, "second-kind moment map inversion"
    )
    return EstimateResult(alpha, diagnostics=info)


# ---------------------------------------------------------------------------
# OUFOU
# ---------------------------------------------------------------------------


def _eta_partials(x: float, y: float, H: float) -> Tuple[float, float]:
    """(d etaX / dx, d etaSigma / dx) at (theta, rho) = (x, y)"""
    g = gamma(2.0 * H + 1.0)
    D = x * x - y * y
    N = x ** (2.0 - 2.0 * H) - y ** (2.0 - 2.0 * H)
    M = x ** (-2.0 * H) - y ** (-2.0 * H)
    d_x = g * ((1.0 - H) * x ** (1.0 - 2.0 * H) * D - x * N) / D**2
    d_sigma = g * (H * x ** (-2.0 * H - 1.0) * D + x * M) / D**2
    return d_x, d_sigma


def eta_jacobian(H: float, theta: float, rho: float) -> np.ndarray:
    """[[d etaX/d theta, d etaX/d rho], [d etaSigma/d theta, d etaSigma/d rho]]"""
    if theta == rho:
        raise DegenerateParametersError("OUFOU requires theta != rho")
    x_t, s_t = _eta_partials(theta, rho, H)
    x_r, s_r = _eta_partials(rho, theta, H)
    return np.array([[x_t, x_r], [s_t, s_r]])


def delta_oufou(kind: str, q: int, H: float, theta: float, rho: float) -> Tuple[float, float]:
    eta_x, eta_sigma = oufou_eta(theta, rho, H)
    return lambda_target(kind, q, eta_x), lambda_target(kind, q, eta_sigma)


def delta_jacobian(kind: str, q: int, H: float, theta: float, rho: float) -> np.ndarray:
    eta_x, eta_sigma = oufou_eta(theta, rho, H)
    outer = np.diag([lambda_derivative(kind, q, eta_x), lambda_derivative(kind, q, eta_sigma)])
    return outer @ eta_jacobian(H, theta, rho)


def _eta_newton(H: float, target: np.ndarray, start: np.ndarray):
    """Damped Newton on log eta in log-parameters; returns (params, iterations) or None"""
    log_target = np.log(target)
    u = np.log(start)

    def residual(u):
        eta = np.array(oufou_eta(math.exp(u[0]), math.exp(u[1]), H))
        if np.any(eta <= 0) or not np.all(np.isfinite(eta)):
            return None, None
        return np.log(eta) - log_target, eta

    res, eta = residual(u)
    if res is None:
        return None
    if np.max(np.abs(res)) < 1e-14:
        return np.exp(u), 0
    for it in range(1, NEWTON_MAX_ITER + 1):
        theta, rho = np.exp(u)
        if abs(theta - rho) < 1e-12 * max(theta, rho):
            return None
        jac = eta_jacobian(H, theta, rho) / eta[:, None] * np.array([theta, rho])[None, :]
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            return None
        scale = 1.0
        norm0 = np.max(np.abs(res))
        while scale > 1e-6:
            trial = u + scale * step
            trial_res, trial_eta = residual(trial)
            if trial_res is not None and np.max(np.abs(trial_res)) < norm0:
                break
            scale *= 0.5
        else:
            # stalled at rounding level
            return (np.exp(u), it) if norm0 < 1e-12 else None
        u, res, eta = trial, trial_res, trial_eta
        if np.max(np.abs(res)) < 1e-14:
            return np.exp(u), it
    return None


def _eta_level_set(H: float, target: np.ndarray):
    """
    One-dimensional fallback: with t = rho/theta, etaX fixes theta(t) in closed
    form by homogeneity, and etaSigma is matched by bracketing in log t.
    """
    a, b = target
    two_h = 2.0 * H

    def theta_of(t):
        return (oufou_eta(1.0, t, H)[0] / a) ** (1.0 / two_h)

    def gap(log_t):
        t = math.exp(log_t)
        th = theta_of(t)
        return math.log(th ** (-two_h - 2.0) * oufou_eta(1.0, t, H)[1]) - math.log(b)

    grid = np.linspace(math.log(1.0 + 1e-6), math.log(1e6), 400)
    values = np.array([gap(s) for s in grid])
    change = np.nonzero(np.sign(values[:-1]) * np.sign(values[1:]) < 0)[0]
    if change.size == 0:
        return None
    i = int(change[0])
    sol = _brentq(gap, (grid[i], grid[i + 1]), "OUFOU level set", xtol=1e-15)
    t = math.exp(sol.root)
    th = theta_of(t)
    return np.array([th, t * th]), sol.iterations


def invert_delta_oufou(
    H: float, observed: Sequence[float], q: int = 2, kind: str = "power"
) -> EstimateResult:
    """
    (theta-hat, rho-hat) with delta(theta, rho) = observed, ordered theta < rho.
    The start comes from the H = 1/2 closed forms etaX = 1/(2(theta+rho)),
    etaSigma = 1/(2 theta rho (theta+rho)).
    """
    _check_kind(kind)
    _check_even_degree(q)
    obs = np.asarray(observed, dtype=float)
    if obs.shape != (2,) or not np.all(obs > 0):
        raise RangeError("OUFOU inversion needs two positive observations", (0.0, math.inf))
    target = np.array([invert_lambda_target(kind, q, float(v)) for v in obs])

    s = 1.0 / (2.0 * target[0])
    p = target[0] / target[1]
    disc = s * s - 4.0 * p
    if disc > 0:
        root = math.sqrt(disc)
        start = np.array([(s - root) / 2.0, (s + root) / 2.0])
    else:
        start = np.array([0.5 * s, 1.5 * s]) / 2.0

    method = "newton"
    found = _eta_newton(H, target, start)
    if found is None:
        logger.info("OUFOU Newton iteration failed, falling back to level-set bracketing")
        method = "level_set"
        found = _eta_level_set(H, target)
    if found is None:
        raise InversionError("OUFOU moment map not inverted", float("nan"))
    params, iterations = found
    theta, rho = sorted(float(v) for v in params)

    fitted = np.array(delta_oufou(kind, q, H, theta, rho))
    residual = float(np.max(np.abs(fitted - obs)))
    if not residual <= RESIDUAL_RTOL * (1.0 + float(np.max(np.abs(obs)))):
        raise InversionError("OUFOU inversion did not reach the residual tolerance", residual)
    if abs(rho - theta) < NEAR_DIAGONAL * rho:
        logger.warning(f"OUFOU estimate ({theta:.6g}, {rho:.6g}) is close to theta == rho, ill-conditioned")
    return EstimateResult(
        (theta, rho),
        diagnostics={"method": method, "iterations": iterations, "residual": residual},
    )


def _cross_tail(values: np.ndarray, J: int, k: int, alpha: Optional[float]) -> float:
    if alpha is None or not math.isfinite(alpha) or values.size == 0:
        return 0.0
    s = 2 * k * alpha
    const = abs(values[-1]) * J**alpha
    return const ** (2 * k) * (J + 0.5) ** (1.0 - s) / (s - 1.0)


def oufou_gamma_matrix(
    H: float, theta: float, rho: float, kind: str = "power", q: int = 2, tol: float = 1e-10
) -> np.ndarray:
    """
    Limit covariance of sqrt(n)(Q(X) - lambda(etaX), Q(Sigma) - lambda(etaSigma)):
    diagonal u-limits of both components and the cross term
    sum_k dX_k dS_k (2k)! sum_{j in Z} corr(Z_0, Sigma_j)^{2k}.
    """
    kernels = oufou_kernels(theta, rho, H)
    poly_x = variation_poly(kind, q, kernels.etaX)
    poly_s = variation_poly(kind, q, kernels.etaSigma)
    u_x = u_limit(poly_x, kernels.kZ, tol)
    u_s = u_limit(poly_s, kernels.kSigma, tol)
    if u_x.diverges or u_s.diverges:
        raise DivergenceError(f"OUFOU limit covariance is infinite for H={H}")

    scale = math.sqrt(kernels.etaX * kernels.etaSigma)
    alpha = kernels.kSigma.tail_exponent
    weights = [
        (k, poly_x.d[k] * poly_s.d[k] * math.factorial(2 * k))
        for k in range(1, q // 2 + 1)
        if poly_x.d[k] * poly_s.d[k] != 0.0
    ]
    J = 256
    previous = None
    while True:
        corr = kernels.cross_values(J) / scale
        neg, pos = corr[:J][::-1], corr[J:]
        cross = 0.0
        for k, w in weights:
            lag_sum = float(np.sum(corr ** (2 * k)))
            lag_sum += _cross_tail(neg, J, k, alpha) + _cross_tail(pos, J, k, alpha)
            cross += w * lag_sum
        if previous is not None and abs(cross - previous) < tol * max(1.0, abs(cross)):
            break
        if J >= 2**16:
            logger.warning(f"OUFOU cross term not settled at lag {J}")
            break
        previous = cross
        J *= 2
    return np.array([[u_x.value, cross], [cross, u_s.value]])


def oufou_estimator_covariance(
    H: float, theta: float, rho: float, n: int, kind: str = "power", q: int = 2
) -> np.ndarray:
    """J^{-1} Gamma J^{-T} / n with J the Jacobian of delta at (theta, rho)"""
    gamma_matrix = oufou_gamma_matrix(H, theta, rho, kind, q)
    jac = delta_jacobian(kind, q, H, theta, rho)
    return delta_method_variance(inverse_derivative(jac), gamma_matrix, n)


# ---------------------------------------------------------------------------
# Delta method and trimming
# ---------------------------------------------------------------------------


def inverse_derivative(forward):
    """Derivative of the inverse map from the derivative (or Jacobian) of the forward map"""
    if np.ndim(forward) == 0:
        forward = float(forward)
        if forward == 0.0 or not math.isfinite(forward):
            raise InversionError("moment map derivative vanishes", abs(forward))
        return 1.0 / forward
    forward = np.asarray(forward, dtype=float)
    if not np.all(np.isfinite(forward)) or np.linalg.cond(forward) > 1e12:
        raise InversionError("moment map Jacobian is singular", float(np.linalg.cond(forward)))
    return np.linalg.inv(forward)


def delta_method_variance(map_derivative, u_value, n: int = 1):
    """g'^2 u / n for scalars, G u G^T / n for matrices; g is the map applied to Q"""
    if n < 1:
        raise ValidationError(f"n must be positive, got {n}")
    if np.ndim(map_derivative) == 0:
        g = float(map_derivative)
        if not math.isfinite(g):
            raise InversionError("non-finite map derivative", abs(g))
        return g * g * float(u_value) / n
    G = np.asarray(map_derivative, dtype=float)
    U = np.asarray(u_value, dtype=float)
    if not np.all(np.isfinite(G)):
        raise InversionError("non-finite map Jacobian", float("nan"))
    return G @ U @ G.T / n


def choose_i0(preliminary_drift: float, kappa: float = 10.0) -> int:
    """Trimming index i0 = ceil(kappa / drift), so that e^{-i0 drift} <= e^{-kappa}"""
    if not preliminary_drift > 0:
        raise ValidationError(f"preliminary drift must be positive, got {preliminary_drift}")
    if not kappa > 0:
        raise ValidationError(f"kappa must be positive, got {kappa}")
    return int(math.ceil(kappa / preliminary_drift - 1e-12))


# ---------------------------------------------------------------------------
# Estimation from observed statistics and paths
# ---------------------------------------------------------------------------

ESTIMATION_FAMILIES = ("fgn", "fou", "fou2", "oufou")


def _check_family(family: str, diff_order: int) -> None:
    if family not in ESTIMATION_FAMILIES:
        raise ValidationError(f"no estimator for model family '{family}'")
    if diff_order and family != "fou":
        raise ValidationError(f"differenced estimation is available for 'fou' only, not '{family}'")
    if diff_order > 1:
        raise ValidationError("the fOU drift map is available for one difference only")


def estimate_from_statistics(
    family: str,
    H: float,
    observed: Union[float, Tuple[float, float]],
    kind: str = "power",
    q: int = 2,
    diff_order: int = 0,
    branch: Optional[str] = None,
    fd_mode: str = "variance",
) -> EstimateResult:
    """Invert the family's moment map at the observed variation(s)"""
    _check_family(family, diff_order)
    if family == "fgn":
        sigma2 = invert_lambda_target(kind, q, float(observed))
        return EstimateResult(sigma2, diagnostics={"method": "closed_form"})
    if family == "fou" and diff_order == 1:
        return invert_mu_fd_fou(H, float(observed), branch, fd_mode)
    if family == "fou":
        return invert_mu_fou(kind, q, H, float(observed))
    if family == "fou2":
        return invert_nu_fou2(kind, q, H, float(observed))
    return invert_delta_oufou(H, observed, q, kind)


def estimator_variance(
    family: str,
    H: float,
    params: Estimate,
    n: int,
    kind: str = "power",
    q: int = 2,
    diff_order: int = 0,
    fd_mode: str = "variance",
):
    """Delta-method variance of the estimator at the given parameter value"""
    _check_family(family, diff_order)
    if family == "fgn":
        sigma2 = float(params)
        limit = u_limit(variation_poly(kind, q, sigma2), fgn_kernel(H, sigma2))
        if limit.diverges:
            raise DivergenceError(f"fGN variance estimator is not asymptotically normal at H={H}")
        return delta_method_variance(1.0 / lambda_derivative(kind, q, sigma2), limit.value, n)
    if family == "fou" and diff_order == 1:
        theta = float(params)
        kernel = finite_diff_kernel(fou_kernel(theta, H), 1)
        limit = u_limit(variation_poly("hermite", 2, kernel.r0), kernel)
        return delta_method_variance(
            inverse_derivative(mu_fd_derivative(H, theta, fd_mode)), limit.value, n
        )
    if family == "fou":
        return fou_estimator_variance(kind, q, H, float(params), n)
    if family == "fou2":
        alpha = float(params)
        kernel = fou2_kernel(alpha, H)
        limit = u_limit(variation_poly(kind, q, kernel.r0), kernel)
        if limit.diverges:
            raise DivergenceError(f"second-kind estimator is not asymptotically normal at H={H}")
        return delta_method_variance(
            inverse_derivative(nu_fou2_derivative(kind, q, H, alpha)), limit.value, n
        )
    theta, rho = params
    return oufou_estimator_covariance(H, theta, rho, n, kind, q)


def estimate_path(
    path: SamplePath,
    family: str,
    H: float,
    kind: str = "power",
    q: int = 2,
    i0: int = 0,
    diff_order: int = 0,
    branch: Optional[str] = None,
    fd_mode: str = "variance",
    two_stage: bool = False,
    kappa: float = 10.0,
) -> EstimateResult:
    """
    Estimate the model parameters from one path. two_stage first estimates on
    the full path and then re-estimates after trimming i0 = choose_i0(estimate).
    """
    _check_family(family, diff_order)
    if two_stage and family in ("fou", "fou2"):
        first = estimate_path(path, family, H, kind, q, 0, diff_order, branch, fd_mode)
        i0 = choose_i0(float(first.estimate), kappa)
        logger.info(f"two-stage estimation: preliminary {first.estimate:.6g}, trimming i0={i0}")

    if diff_order:
        # the first-difference map is stated for the quadratic Hermite variation
        kind, q = "hermite", 2
    poly = variation_poly(kind, q, 1.0)
    work = finite_diff_path(path, diff_order) if diff_order else path
    n = work.values.size - i0
    observed = trimmed_variation(work, poly, i0)
    if family == "oufou":
        if work.companion is None:
            raise ValidationError("OUFOU estimation needs the Sigma path (sigma_value column)")
        observed = (observed, trimmed_variation(work.companion, poly, i0))

    result = estimate_from_statistics(family, H, observed, kind, q, diff_order, branch, fd_mode)
    try:
        result.with_variance(
            estimator_variance(family, H, result.estimate, n, kind, q, diff_order, fd_mode)
        )
    except DivergenceError as e:
        logger.warning(f"no delta-method variance: {e}")
    result.diagnostics.update(observed=observed, i0=i0, n=n, diff_order=diff_order)
    return result
