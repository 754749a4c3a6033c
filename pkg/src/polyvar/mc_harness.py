"""
Monte Carlo rate studies.

For every n of the grid, M replications are drawn with the exact samplers,
the normalized variation statistic is formed per replication, and its
distance to the normal law is estimated (quantile-coupling Wasserstein-1 with
bootstrap standard errors, Kolmogorov as a lower proxy for total variation).
The fitted log-log slope is compared with the predicted rate class and the
exact-cumulant bound.

Usage:
    from polyvar.config import resolve_config
    from polyvar.mc_harness import run_experiment
    result = run_experiment(resolve_config("config/fou-h055.yaml"))
    result.save()
"""

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from .config import ExperimentConfig, json_default
from .cov_models import CovKernel, ProcessModel, finite_diff_kernel
from .errors import (
    DivergenceError,
    ExperimentAbortedError,
    NumericError,
    PolyvarError,
    ValidationError,
)
from .estimators import estimate_from_statistics, estimator_variance
from .exact_sampler import (
    PairSampler,
    StationarySampler,
    decay_correction,
    oufou_paths,
    replication_rng,
)
from .hermite_basis import HermitePoly, variation_poly
from .plots import plot_rate_study
from .rate_bounds import rate_class_for, tv_upper_bound, wasserstein_upper_bound
from .tracking import RunTracker
from .variation_stats import align_poly, exact_var_U, quad_cumulants, u_limit

logger = logging.getLogger(__name__)

BOOTSTRAP_RESAMPLES = 200
# replication index reserved for the bootstrap stream of each n
BOOTSTRAP_REPLICATION = 2**31 - 1
MIN_FIT_POINTS = 4
MIN_FIT_DECADES = 1.5
CSV_COLUMNS = [
    "n",
    "M",
    "dW_hat",
    "dW_se",
    "dK_hat",
    "tv_bound",
    "predicted_class",
    "estimator_bias",
    "estimator_rmse",
]


# ---------------------------------------------------------------------------
# Distances to the normal law
# ---------------------------------------------------------------------------


def _check_samples(samples, sigma2: float) -> np.ndarray:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 1:
        raise ValidationError("no samples")
    if not sigma2 > 0:
        raise ValidationError(f"sigma2 must be positive, got {sigma2}")
    return x


def normal_quantiles(M: int, sigma2: float = 1.0) -> np.ndarray:
    return math.sqrt(sigma2) * stats.norm.ppf((np.arange(1, M + 1) - 0.5) / M)


def wasserstein1_to_normal(samples, sigma2: float = 1.0) -> float:
    """(1/M) sum_i |x_(i) - sigma Phi^{-1}((i - 1/2)/M)|"""
    x = np.sort(_check_samples(samples, sigma2))
    if x.size < 100:
        logger.warning(f"Wasserstein estimate from only {x.size} samples")
    if np.ptp(x) == 0.0:
        logger.warning("degenerate samples (zero spread) in the Wasserstein estimate")
    return float(np.mean(np.abs(x - normal_quantiles(x.size, sigma2))))


def kolmogorov_to_normal(samples, sigma2: float = 1.0) -> float:
    x = _check_samples(samples, sigma2)
    return float(stats.kstest(x, "norm", args=(0.0, math.sqrt(sigma2))).statistic)


def bootstrap_se(
    samples,
    statistic,
    rng: np.random.Generator,
    resamples: int = BOOTSTRAP_RESAMPLES,
) -> float:
    """Nonparametric bootstrap standard error of statistic(samples)"""
    x = np.asarray(samples, dtype=float)
    if resamples < 2:
        return float("nan")
    values = np.empty(resamples)
    for b in range(resamples):
        values[b] = statistic(x[rng.integers(0, x.size, x.size)])
    return float(np.std(values, ddof=1))


# ---------------------------------------------------------------------------
# Rate fit
# ---------------------------------------------------------------------------


@dataclass
class RateFit:
    slope: float
    intercept: float
    ci95: Tuple[float, float]
    r2: float
    slope_se: float
    n_points: int

    def to_dict(self) -> Dict:
        return asdict(self)


def rate_fit(points: Sequence[Tuple[float, float]], se: Optional[Sequence[float]] = None) -> RateFit:
    """
    Weighted least squares of log distance on log n. Weights are the inverse
    variances of log d from the distance standard errors (delta method);
    without standard errors the fit is ordinary least squares.
    """
    n = np.array([p[0] for p in points], dtype=float)
    d = np.array([p[1] for p in points], dtype=float)
    s = np.full(n.size, np.nan) if se is None else np.asarray(se, dtype=float)
    keep = np.isfinite(d) & (d > 0) & (n > 0)
    if not keep.all():
        logger.warning(f"rate fit: dropping {int((~keep).sum())} nonpositive or missing distances")
    n, d, s = n[keep], d[keep], s[keep]
    if n.size < 3:
        raise ValidationError(f"rate fit needs at least 3 valid points, got {n.size}")
    decades = math.log10(n.max() / n.min())
    if n.size < MIN_FIT_POINTS or decades < MIN_FIT_DECADES:
        logger.warning(f"rate fit on {n.size} points spanning {decades:.2f} decades")

    x, y = np.log(n), np.log(d)
    rel = s / d
    if np.all(np.isfinite(rel)) and np.all(rel > 0):
        w = 1.0 / rel**2
        w = w / w.mean()
    else:
        w = np.ones_like(x)

    X = np.column_stack([np.ones_like(x), x])
    XtW = X.T * w
    cov_unscaled = np.linalg.inv(XtW @ X)
    intercept, slope = cov_unscaled @ (XtW @ y)
    resid = y - (intercept + slope * x)
    dof = x.size - 2
    sigma2 = float(np.sum(w * resid**2) / dof)
    slope_se = math.sqrt(max(sigma2 * cov_unscaled[1, 1], 0.0))
    half = float(stats.t.ppf(0.975, dof)) * slope_se
    y_bar = np.sum(w * y) / np.sum(w)
    total = float(np.sum(w * (y - y_bar) ** 2))
    r2 = 1.0 - float(np.sum(w * resid**2)) / total if total > 0 else 1.0
    return RateFit(
        slope=float(slope),
        intercept=float(intercept),
        ci95=(float(slope) - half, float(slope) + half),
        r2=r2,
        slope_se=slope_se,
        n_points=int(x.size),
    )


# ---------------------------------------------------------------------------
# Workers
# ---------------------------------------------------------------------------


@dataclass
class EstimatorTask:
    family: str
    H: float
    kind: str
    q: int
    diff_order: int
    branch: Optional[str]
    fd_mode: str


@dataclass
class ChunkTask:
    """Replications [start, stop) of one grid point; only arrays and scalars"""

    n: int
    seed: int
    start: int
    stop: int
    sampler: object
    poly: HermitePoly
    lam: float
    scale: float
    mode: str
    i0: int
    p: int
    decay: Optional[float]
    pair: Optional[Tuple[float, float]]
    component: str
    estimator: Optional[EstimatorTask] = None
    estimator_poly: Optional[HermitePoly] = None


@dataclass
class ChunkOutput:
    start: int
    statistics: np.ndarray
    estimates: Optional[np.ndarray]
    errors: List[str] = field(default_factory=list)


def _draw(task: ChunkTask, rngs) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    stationary = task.mode == "stationary"
    if task.pair is not None:
        x, s = oufou_paths(task.sampler.draw_batch(rngs), *task.pair, stationary=stationary)
    else:
        x, s = task.sampler.draw_batch(rngs), None
        if not stationary and task.decay is not None:
            x = decay_correction(x, task.decay)
    if task.p:
        x = np.diff(x, n=task.p, axis=-1)
        s = None if s is None else np.diff(s, n=task.p, axis=-1)
    window = slice(task.i0, task.i0 + task.n)
    return x[:, window], None if s is None else s[:, window]


def _estimate(task: ChunkTask, x: np.ndarray, s: Optional[np.ndarray]):
    est = task.estimator
    q_x = task.estimator_poly(x).mean(axis=1)
    q_s = None if s is None else task.estimator_poly(s).mean(axis=1)
    width = 2 if est.family == "oufou" else 1
    out = np.full((x.shape[0], width), np.nan)
    errors = []
    for i in range(x.shape[0]):
        observed = (q_x[i], q_s[i]) if width == 2 else q_x[i]
        try:
            value = estimate_from_statistics(
                est.family, est.H, observed, est.kind, est.q, est.diff_order, est.branch, est.fd_mode
            ).estimate
        except PolyvarError as e:
            errors.append(f"replication {task.start + i}: {e}")
            continue
        out[i] = value
    return out, errors


def run_chunk(task: ChunkTask) -> ChunkOutput:
    """Worker entry point; pure function of the task"""
    count = task.stop - task.start
    statistics = np.full(count, np.nan)
    rngs = [replication_rng(task.seed, r, stream=task.n) for r in range(task.start, task.stop)]
    try:
        x, s = _draw(task, rngs)
    except NumericError as e:
        return ChunkOutput(task.start, statistics, None, [f"chunk {task.start}-{task.stop}: {e}"])

    values = s if task.component == "sigma" else x
    with np.errstate(all="ignore"):
        q = task.poly(values).mean(axis=1)
        statistics = math.sqrt(task.n) * (q - task.lam) / task.scale
    errors = [
        f"replication {task.start + i}: non-finite statistic"
        for i in np.nonzero(~np.isfinite(statistics))[0]
    ]
    statistics = np.where(np.isfinite(statistics), statistics, np.nan)

    estimates = None
    if task.estimator is not None:
        estimates, est_errors = _estimate(task, x, s)
        errors.extend(est_errors)
    return ChunkOutput(task.start, statistics, estimates, errors)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class ExperimentRow:
    n: int
    M: int
    dW_hat: Optional[float] = None
    dW_se: Optional[float] = None
    dK_hat: Optional[float] = None
    tv_bound: Optional[float] = None
    predicted_class: str = ""
    estimator_bias: Optional[float] = None
    estimator_rmse: Optional[float] = None
    failures: int = 0
    target_variance: float = 1.0
    var_U_exact: Optional[float] = None
    u_limit: Optional[float] = None
    kappa4_F: Optional[float] = None
    w_bound: Optional[float] = None
    estimator_coverage: Optional[float] = None
    estimator_bias_2: Optional[float] = None
    estimator_rmse_2: Optional[float] = None
    estimator_cov: Optional[List[List[float]]] = None
    predicted_cov: Optional[List[List[float]]] = None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: List[ExperimentRow]
    fit: Optional[RateFit]
    predicted_class: str
    predicted_slope: Optional[float]
    fit_kolmogorov: Optional[RateFit] = None
    paths: Dict[str, str] = field(default_factory=dict)

    @property
    def run_name(self) -> str:
        return self.config.run_name

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            record = asdict(row)
            record.pop("estimator_cov")
            record.pop("predicted_cov")
            records.append(record)
        frame = pd.DataFrame.from_records(records)
        extra = [c for c in frame.columns if c not in CSV_COLUMNS]
        return frame[CSV_COLUMNS + extra]

    def summary(self) -> Dict:
        return {
            "run_name": self.run_name,
            "config": self.config.to_dict(),
            "predicted_class": self.predicted_class,
            "predicted_slope": self.predicted_slope,
            "fit": None if self.fit is None else self.fit.to_dict(),
            "fit_kolmogorov": None if self.fit_kolmogorov is None else self.fit_kolmogorov.to_dict(),
            "rows": [asdict(row) for row in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, default=json_default, sort_keys=True)

    def save(self, out_dir: Optional[str] = None, plot: bool = True) -> Dict[str, str]:
        """CSV (row = n), JSON summary, (log n, log d) file and PNG plot"""
        out_dir = out_dir or self.config.out_dir
        os.makedirs(out_dir, exist_ok=True)
        base = os.path.join(out_dir, self.run_name)
        frame = self.to_frame()
        frame.to_csv(f"{base}.csv", index=False, float_format="%.10g")
        with open(f"{base}.json", "w") as f:
            f.write(self.to_json())
        valid = frame[(frame["dW_hat"] > 0) & frame["dW_hat"].notna()]
        pd.DataFrame(
            {"log_n": np.log(valid["n"].astype(float)), "log_dW": np.log(valid["dW_hat"].astype(float))}
        ).to_csv(f"{base}_loglog.csv", index=False, float_format="%.10g")
        self.paths = {"csv": f"{base}.csv", "json": f"{base}.json", "loglog": f"{base}_loglog.csv"}
        if plot and self.fit is not None:
            self.paths["png"] = plot_rate_study(self, f"{base}.png")
        logger.info(f"Results written to {out_dir}")
        return self.paths


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


class RateStudy:
    """Runs one ExperimentConfig over its n grid"""

    def __init__(self, config: ExperimentConfig, tracker: Optional[RunTracker] = None):
        self.config = config.validate()
        self.model: ProcessModel = config.model.build()
        self.tracker = tracker or RunTracker(config.experiment_name, enabled=config.mlflow)
        self.logger = logger

    # -- per-n setup --------------------------------------------------------

    def _base_kernel(self) -> CovKernel:
        if self.config.component == "sigma":
            return self.model.companion_kernel()
        return self.model.kernel()

    def studied_kernel(self) -> CovKernel:
        kernel = self._base_kernel()
        if self.config.mode == "finite_diff":
            kernel = finite_diff_kernel(kernel, self.config.p)
        return kernel

    def _sampler(self, length: int):
        if self.model.variant == "oufou":
            return PairSampler(self.model.theta, self.model.rho, self.model.H, length)
        return StationarySampler(self.model.kernel(), length)

    def _normalization(self, poly: HermitePoly, kernel: CovKernel, n: int, row: ExperimentRow):
        """(scale of U, variance of the reference normal)"""
        var_u = exact_var_U(poly, kernel, n)
        limit = u_limit(poly, kernel)
        row.var_U_exact = var_u
        row.u_limit = None if limit.diverges else limit.value
        norm = self.config.normalization
        if norm == "exact_variance":
            return math.sqrt(var_u), 1.0
        if norm == "asymptotic_variance":
            if limit.diverges:
                raise DivergenceError(
                    f"{kernel.name}: asymptotic normalization needs the Breuer-Major condition"
                )
            return math.sqrt(limit.value), 1.0
        return 1.0, var_u if limit.diverges else limit.value

    def _estimator_task(self) -> Tuple[Optional[EstimatorTask], Optional[HermitePoly]]:
        cfg = self.config
        if not cfg.estimation:
            return None, None
        kind, q = cfg.poly.kind, cfg.poly.q
        if cfg.mode == "finite_diff":
            kind, q = "hermite", 2
        if kind not in ("hermite", "power"):
            raise ValidationError("estimation needs poly kind 'hermite' or 'power'")
        if cfg.mode == "finite_diff" and (self.model.variant != "fou" or cfg.p != 1):
            raise ValidationError("differenced estimation is available for fou with p = 1 only")
        self._true_parameters()
        task = EstimatorTask(
            family=self.model.variant,
            H=self.model.H,
            kind=kind,
            q=q,
            diff_order=cfg.p if cfg.mode == "finite_diff" else 0,
            branch=cfg.branch,
            fd_mode=cfg.fd_mode,
        )
        return task, variation_poly(kind, q, 1.0)

    def _true_parameters(self):
        m = self.model
        if m.variant == "fgn":
            return m.sigma2
        if m.variant == "fou":
            return m.theta
        if m.variant == "fou2":
            return m.alpha
        if m.variant == "oufou":
            return (m.theta, m.rho)
        raise ValidationError(f"no estimator for model family '{m.variant}'")

    def _chunks(self, n: int, base: Dict) -> List[ChunkTask]:
        size = self.config.chunk_size
        M = self.config.replications
        return [
            ChunkTask(n=n, seed=self.config.seed, start=a, stop=min(a + size, M), **base)
            for a in range(0, M, size)
        ]

    def _execute(self, tasks: List[ChunkTask]) -> List[ChunkOutput]:
        if self.config.workers == 1 or len(tasks) == 1:
            return [run_chunk(task) for task in tasks]
        with ProcessPoolExecutor(max_workers=self.config.workers) as pool:
            # map preserves submission order
            return list(pool.map(run_chunk, tasks))

    # -- one grid point -----------------------------------------------------

    def run_n(self, n: int) -> ExperimentRow:
        cfg = self.config
        M = cfg.replications
        row = ExperimentRow(n=n, M=M)
        kernel = self.studied_kernel()
        poly = align_poly(cfg.poly.build(kernel.r0), kernel.r0)
        lam = float(poly.coeffs[0])
        scale, target_var = self._normalization(poly, kernel, n, row)
        row.target_variance = target_var

        length = n + (cfg.i0 if cfg.mode == "trimmed" else 0) + (cfg.p if cfg.mode == "finite_diff" else 0)
        estimator, estimator_poly = self._estimator_task()
        base = dict(
            sampler=self._sampler(length),
            poly=poly,
            lam=lam,
            scale=scale,
            mode=cfg.mode,
            i0=cfg.i0 if cfg.mode == "trimmed" else 0,
            p=cfg.p if cfg.mode == "finite_diff" else 0,
            decay=None if self.model.stationary or self.model.variant == "oufou" else self.model.decay_rate,
            pair=(self.model.theta, self.model.rho) if self.model.variant == "oufou" else None,
            component=cfg.component,
            estimator=estimator,
            estimator_poly=estimator_poly,
        )
        outputs = self._execute(self._chunks(n, base))

        statistics = np.concatenate([o.statistics for o in outputs])
        errors = [msg for o in outputs for msg in o.errors]
        failed = ~np.isfinite(statistics)
        if estimator is not None:
            estimates = np.concatenate([o.estimates for o in outputs if o.estimates is not None])
            if estimates.shape[0] == M:
                failed |= ~np.all(np.isfinite(estimates), axis=1)
            else:
                failed[:] = True
        row.failures = int(failed.sum())
        for msg in errors[:5]:
            self.logger.warning(msg)
        if row.failures > cfg.max_failure_rate * M:
            self.logger.error(f"n={n}: {row.failures} of {M} replications failed")
            raise ExperimentAbortedError(
                f"n={n}: {row.failures}/{M} replications failed (limit {cfg.max_failure_rate:.1%})"
            )
        if row.failures:
            self.logger.warning(f"n={n}: excluding {row.failures} failed replications")
        sample = statistics[~failed]
        row.M = int(sample.size)

        self._distances(n, sample, target_var, row)
        self._bounds(n, poly, kernel, row)
        if estimator is not None:
            self._estimator_errors(n, estimates[~failed], estimator, row)
        return row

    def _distances(self, n: int, sample: np.ndarray, target_var: float, row: ExperimentRow):
        cfg = self.config
        if "wasserstein1" in cfg.distances:
            row.dW_hat = wasserstein1_to_normal(sample, target_var)
            rng = replication_rng(cfg.seed, BOOTSTRAP_REPLICATION, stream=n)
            row.dW_se = bootstrap_se(
                sample, lambda x: wasserstein1_to_normal(x, target_var), rng, cfg.bootstrap_resamples
            )
        if "kolmogorov" in cfg.distances:
            row.dK_hat = kolmogorov_to_normal(sample, target_var)

    def _bounds(self, n: int, poly: HermitePoly, kernel: CovKernel, row: ExperimentRow):
        cfg = self.config
        diff_order = cfg.p if cfg.mode == "finite_diff" else 0
        row.predicted_class = rate_class_for(
            self.model, poly.degree, cfg.normalization, diff_order, kernel=self._base_kernel()
        ).name
        try:
            row.kappa4_F = quad_cumulants(kernel, n).kappa4_F
            row.tv_bound = tv_upper_bound(poly, kernel, n, cfg.normalization)
        except DivergenceError as e:
            self.logger.warning(f"n={n}: no total-variation bound ({e})")
        if cfg.mode in ("nonstationary", "trimmed") and not self.model.stationary:
            try:
                row.w_bound = wasserstein_upper_bound(
                    poly, self.model, n, cfg.normalization, cfg.i0 if cfg.mode == "trimmed" else 0, kernel
                )
            except (DivergenceError, ValidationError) as e:
                self.logger.warning(f"n={n}: no Wasserstein envelope ({e})")

    def _estimator_errors(self, n: int, estimates: np.ndarray, task: EstimatorTask, row: ExperimentRow):
        truth = np.atleast_1d(np.asarray(self._true_parameters(), dtype=float))
        errors = estimates - truth[None, :]
        row.estimator_bias = float(errors[:, 0].mean())
        row.estimator_rmse = float(np.sqrt(np.mean(errors[:, 0] ** 2)))
        if truth.size == 2:
            row.estimator_bias_2 = float(errors[:, 1].mean())
            row.estimator_rmse_2 = float(np.sqrt(np.mean(errors[:, 1] ** 2)))
            row.estimator_cov = (n * np.cov(errors, rowvar=False)).tolist()
        params = tuple(truth) if truth.size == 2 else float(truth[0])
        try:
            variance = estimator_variance(
                task.family, task.H, params, n, task.kind, task.q, task.diff_order, task.fd_mode
            )
        except (DivergenceError, NumericError) as e:
            self.logger.warning(f"n={n}: no delta-method variance for coverage ({e})")
            return
        if truth.size == 2:
            row.predicted_cov = (n * np.asarray(variance)).tolist()
            se = np.sqrt(np.diag(variance))
        else:
            se = np.array([math.sqrt(variance)])
        covered = np.all(np.abs(errors) <= stats.norm.ppf(0.975) * se[None, :], axis=1)
        row.estimator_coverage = float(covered.mean())

    # -- whole grid ---------------------------------------------------------

    def run(self) -> ExperimentResult:
        cfg = self.config
        predicted = rate_class_for(
            self.model,
            cfg.poly.degree,
            cfg.normalization,
            cfg.p if cfg.mode == "finite_diff" else 0,
            kernel=self._base_kernel(),
        )
        self.logger.info(
            f"Rate study {cfg.run_name}: {self.model.label()}, M={cfg.replications}, "
            f"grid {cfg.n_grid}, predicted {predicted.name}"
        )
        params = {
            "model": self.model.label(),
            "poly": f"{cfg.poly.kind}{cfg.poly.degree}",
            "mode": cfg.mode,
            "normalization": cfg.normalization,
            "replications": cfg.replications,
            "seed": cfg.seed,
        }
        self.tracker.start(cfg.run_name, params)
        rows = []
        try:
            for n in cfg.n_grid:
                row = self.run_n(n)
                rows.append(row)
                self.logger.info(
                    f"n={n}: dW={row.dW_hat}, dK={row.dK_hat}, tv_bound={row.tv_bound}"
                )
                self.tracker.log_row(n, {"dW_hat": row.dW_hat, "dK_hat": row.dK_hat, "tv_bound": row.tv_bound})
        except PolyvarError:
            self.tracker.finish()
            raise

        fit = fit_k = None
        if "wasserstein1" in cfg.distances and len(rows) >= 3:
            fit = rate_fit([(r.n, r.dW_hat) for r in rows], [r.dW_se for r in rows])
            self.logger.info(
                f"fitted slope {fit.slope:.4f} (95% CI {fit.ci95[0]:.4f}, {fit.ci95[1]:.4f}), R2={fit.r2:.4f}"
            )
        if "kolmogorov" in cfg.distances and len(rows) >= 3:
            fit_k = rate_fit([(r.n, r.dK_hat) for r in rows])
        result = ExperimentResult(
            config=cfg,
            rows=rows,
            fit=fit,
            predicted_class=predicted.name,
            predicted_slope=predicted.slope,
            fit_kolmogorov=fit_k,
        )
        if fit is not None:
            self.tracker.log_fit(fit.slope, fit.ci95, fit.r2)
        self.tracker.set_tags({"rate_class": predicted.name, "model": self.model.variant})
        return result


def run_experiment(config: ExperimentConfig, save: bool = True) -> ExperimentResult:
    study = RateStudy(config)
    result = study.run()
    if save:
        paths = result.save()
        study.tracker.log_artifacts(paths.values())
    study.tracker.finish()
    return result
