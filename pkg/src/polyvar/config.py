"""
Experiment configuration.

Files are YAML (or JSON) documents made of sections of flat key/value maps:

    model:       family, H, sigma2, theta, rho, alpha, table, tail_exponent
    poly:        kind, q, coeffs
    grid:        n (list) or n_min/n_max (doubling), replications, seed
    statistic:   mode, i0, p, normalization, component
    distances:   wasserstein1, kolmogorov (booleans)
    estimation:  enabled, branch, fd_mode, two_stage, kappa
    bootstrap:   resamples
    output:      dir, name
    tracking:    mlflow, experiment_name
    input:       path
    execution:   workers, chunk_size, max_failure_rate

Precedence is command line > environment > file > defaults.

Environment variables:
    POLYVAR_SEED, POLYVAR_OUT_DIR, POLYVAR_WORKERS, POLYVAR_EXPERIMENT_NAME
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from .cov_models import MODEL_VARIANTS, ProcessModel, load_tabulated_kernel
from .errors import ConfigError, PolyvarError
from .hermite_basis import VARIATION_KINDS, HermitePoly, poly_to_hermite, variation_poly
from .rate_bounds import NORMALIZATIONS

logger = logging.getLogger(__name__)

MODES = ("stationary", "nonstationary", "trimmed", "finite_diff")
DISTANCES = ("wasserstein1", "kolmogorov")
COMPONENTS = ("x", "sigma")
SECTIONS = (
    "model",
    "poly",
    "grid",
    "statistic",
    "distances",
    "estimation",
    "bootstrap",
    "output",
    "tracking",
    "input",
    "execution",
)
MIN_REPLICATIONS = 100


@dataclass
class ModelSpec:
    family: str = "fou"
    H: Optional[float] = 0.55
    sigma2: float = 1.0
    theta: Optional[float] = 1.0
    rho: Optional[float] = None
    alpha: Optional[float] = None
    table: Optional[str] = None
    tail_exponent: Optional[float] = None

    def build(self) -> ProcessModel:
        if self.family not in MODEL_VARIANTS:
            raise ConfigError(f"unknown family '{self.family}'", "model.family")
        table = None
        if self.family == "tabulated":
            if not self.table:
                raise ConfigError("tabulated model needs a CSV table", "model.table")
            kernel = load_tabulated_kernel(self.table, self.tail_exponent)
            table = kernel.values(kernel.params["n_lags"] - 1)
        try:
            return ProcessModel(
                self.family,
                H=self.H if self.family != "tabulated" else None,
                sigma2=self.sigma2,
                theta=self.theta if self.family in ("fou", "oufou") else None,
                rho=self.rho if self.family == "oufou" else None,
                alpha=self.alpha if self.family == "fou2" else None,
                table=table,
                table_tail_exponent=self.tail_exponent,
            )
        except PolyvarError as e:
            raise ConfigError(str(e), "model") from e


@dataclass
class PolySpec:
    """kind hermite/power with degree q, or general with monomial coeffs a_0..a_q"""

    kind: str = "hermite"
    q: int = 2
    coeffs: Optional[List[float]] = None

    def build(self, r0: float = 1.0) -> HermitePoly:
        if self.kind == "general":
            if not self.coeffs:
                raise ConfigError("general polynomial needs monomial coeffs", "poly.coeffs")
            return poly_to_hermite(self.coeffs, r0)
        if self.kind not in VARIATION_KINDS:
            raise ConfigError(f"unknown kind '{self.kind}'", "poly.kind")
        return variation_poly(self.kind, self.q, r0)

    @property
    def degree(self) -> int:
        if self.kind == "general" and self.coeffs:
            return len(self.coeffs) - 1
        return self.q


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    poly: PolySpec = field(default_factory=PolySpec)
    n_grid: List[int] = field(default_factory=lambda: [2**k for k in range(8, 14)])
    replications: int = 2000
    seed: int = 0
    mode: str = "stationary"
    i0: int = 0
    p: int = 0
    normalization: str = "exact_variance"
    component: str = "x"
    distances: List[str] = field(default_factory=lambda: list(DISTANCES))
    estimation: bool = False
    branch: Optional[str] = None
    fd_mode: str = "variance"
    two_stage: bool = False
    kappa: float = 10.0
    bootstrap_resamples: int = 200
    out_dir: str = "results"
    name: Optional[str] = None
    mlflow: bool = False
    experiment_name: str = "polyvar-rate-study"
    input_path: Optional[str] = None
    workers: int = 1
    chunk_size: int = 200
    max_failure_rate: float = 0.01

    @property
    def run_name(self) -> str:
        if self.name:
            return self.name
        mode = self.mode
        if mode == "trimmed":
            mode = f"trimmed{self.i0}"
        elif mode == "finite_diff":
            mode = f"diff{self.p}"
        return f"{self.model.family}-{self.poly.kind}{self.poly.degree}-{mode}"

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode '{self.mode}', expected {MODES}", "statistic.mode")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(
                f"unknown normalization '{self.normalization}'", "statistic.normalization"
            )
        if self.component not in COMPONENTS:
            raise ConfigError(f"unknown component '{self.component}'", "statistic.component")
        if self.component == "sigma" and self.model.family != "oufou":
            raise ConfigError("component 'sigma' exists for oufou only", "statistic.component")
        if not self.n_grid or any(n < 2 for n in self.n_grid):
            raise ConfigError("n grid must hold integers >= 2", "grid.n")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ConfigError("n grid must be strictly increasing", "grid.n")
        unknown = set(self.distances) - set(DISTANCES)
        if unknown:
            raise ConfigError(f"unknown distances {sorted(unknown)}", "distances")
        if self.distances and self.replications < MIN_REPLICATIONS:
            raise ConfigError(
                f"distance estimation needs at least {MIN_REPLICATIONS} replications",
                "grid.replications",
            )
        if self.replications < 1:
            raise ConfigError("replications must be positive", "grid.replications")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative", "grid.seed")
        if self.mode == "trimmed" and self.i0 < 1:
            raise ConfigError("trimmed mode needs i0 >= 1", "statistic.i0")
        if self.mode == "finite_diff" and self.p < 1:
            raise ConfigError("finite_diff mode needs p >= 1", "statistic.p")
        if self.workers < 1:
            raise ConfigError("workers must be positive", "execution.workers")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be positive", "execution.chunk_size")
        if not 0.0 <= self.max_failure_rate < 1.0:
            raise ConfigError("max_failure_rate must lie in [0, 1)", "execution.max_failure_rate")
        if self.bootstrap_resamples < 0:
            raise ConfigError("resamples must be nonnegative", "bootstrap.resamples")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# section key -> ExperimentConfig field
_FLAT_KEYS = {
    ("grid", "replications"): "replications",
    ("grid", "seed"): "seed",
    ("statistic", "mode"): "mode",
    ("statistic", "i0"): "i0",
    ("statistic", "p"): "p",
    ("statistic", "normalization"): "normalization",
    ("statistic", "component"): "component",
    ("estimation", "enabled"): "estimation",
    ("estimation", "branch"): "branch",
    ("estimation", "fd_mode"): "fd_mode",
    ("estimation", "two_stage"): "two_stage",
    ("estimation", "kappa"): "kappa",
    ("bootstrap", "resamples"): "bootstrap_resamples",
    ("output", "dir"): "out_dir",
    ("output", "name"): "name",
    ("tracking", "mlflow"): "mlflow",
    ("tracking", "experiment_name"): "experiment_name",
    ("input", "path"): "input_path",
    ("execution", "workers"): "workers",
    ("execution", "chunk_size"): "chunk_size",
    ("execution", "max_failure_rate"): "max_failure_rate",
}


def _section_dataclass(cls, values: Dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", section)
    return cls(**values)


def _n_grid(grid: Dict) -> Optional[List[int]]:
    if "n" in grid:
        values = grid["n"]
        if not isinstance(values, list):
            raise ConfigError("expected a list of sample sizes", "grid.n")
        return [int(v) for v in values]
    if "n_min" in grid or "n_max" in grid:
        try:
            lo, hi = int(grid["n_min"]), int(grid["n_max"])
        except KeyError as e:
            raise ConfigError("n_min and n_max go together", f"grid.{e.args[0]}")
        grid_values = []
        n = lo
        while n <= hi:
            grid_values.append(n)
            n *= 2
        return grid_values
    return None


def config_from_dict(document: Dict) -> ExperimentConfig:
    if not isinstance(document, dict):
        raise ConfigError("configuration must be a mapping of sections")
    unknown = set(document) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    for section, values in document.items():
        if values is not None and not isinstance(values, dict):
            raise ConfigError("each section must be a flat key/value map", section)

    sections = {s: dict(document.get(s) or {}) for s in SECTIONS}
    config = ExperimentConfig(
        model=_section_dataclass(ModelSpec, sections["model"], "model"),
        poly=_section_dataclass(PolySpec, sections["poly"], "poly"),
    )
    grid = sections["grid"]
    n_grid = _n_grid(grid)
    if n_grid is not None:
        config.n_grid = n_grid
    grid.pop("n", None)
    grid.pop("n_min", None)
    grid.pop("n_max", None)

    distances = sections.pop("distances")
    if distances:
        config.distances = [name for name, wanted in distances.items() if wanted]
        unknown = set(distances) - set(DISTANCES)
        if unknown:
            raise ConfigError(f"unknown distances {sorted(unknown)}", "distances")

    for section in SECTIONS:
        if section in ("model", "poly", "distances"):
            continue
        for key, value in sections[section].items():
            target = _FLAT_KEYS.get((section, key))
            if target is None:
                raise ConfigError("unknown key", f"{section}.{key}")
            setattr(config, target, value)
    return config


def load_config(path: str) -> ExperimentConfig:
    """Parse a YAML or JSON experiment file into a validated ExperimentConfig"""
    if not os.path.exists(path):
        raise ConfigError(f"configuration file not found: {path}")
    try:
        with open(path) as f:
            if path.endswith(".json"):
                document = json.load(f)
            else:
                document = yaml.safe_load(f)
    except (yaml.YAMLError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}")
    logger.info(f"Loaded configuration from {path}")
    return config_from_dict(document or {})


def _env_int(name: str) -> Optional[int]:
    value = os.getenv(name)
    if value is None:
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"expected an integer, got '{value}'", name)


def resolve_config(
    path: Optional[str] = None,
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
    workers: Optional[int] = None,
) -> ExperimentConfig:
    """File values, then environment overrides, then command-line overrides"""
    config = load_config(path) if path else ExperimentConfig()

    env_seed = _env_int("POLYVAR_SEED")
    env_workers = _env_int("POLYVAR_WORKERS")
    config.seed = env_seed if env_seed is not None else config.seed
    config.workers = env_workers if env_workers is not None else config.workers
    config.out_dir = os.getenv("POLYVAR_OUT_DIR", config.out_dir)
    config.experiment_name = os.getenv("POLYVAR_EXPERIMENT_NAME", config.experiment_name)

    if seed is not None:
        config.seed = seed
    if out_dir is not None:
        config.out_dir = out_dir
    if workers is not None:
        config.workers = workers
    return config.validate()


def dump_config(config: ExperimentConfig, path: str) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)


def json_default(value):
    """JSON encoder fallback for numpy scalars and arrays"""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")
