"""
Optional MLflow tracking of rate studies.

Tracking never fails a run: MLflow errors are logged as warnings. The
tracking server is taken from MLFLOW_TRACKING_URI as usual.
"""

import logging
import os
from typing import Dict, Iterable, Optional

import mlflow

logger = logging.getLogger(__name__)


class RunTracker:
    """Logs config params, per-n metrics, the fitted slope and artifacts"""

    def __init__(self, experiment_name: Optional[str] = None, enabled: bool = True):
        self.experiment_name = os.getenv(
            "POLYVAR_EXPERIMENT_NAME", experiment_name or "polyvar-rate-study"
        )
        self.enabled = enabled
        self.active = False

    def _call(self, what: str, func, *args, **kwargs):
        if not self.active:
            return None
        try:
            return func(*args, **kwargs)
        except Exception as e:
            logger.warning(f"MLflow {what} failed: {e}")
            return None

    def start(self, run_name: str, params: Dict) -> None:
        if not self.enabled:
            return
        try:
            mlflow.set_experiment(self.experiment_name)
            mlflow.start_run(run_name=run_name)
        except Exception as e:
            logger.warning(f"MLflow tracking disabled: {e}")
            return
        self.active = True
        logger.info(f"MLflow run '{run_name}' in experiment '{self.experiment_name}'")
        for key, value in params.items():
            self._call("log_param", mlflow.log_param, key, value)

    def log_row(self, n: int, metrics: Dict[str, Optional[float]]) -> None:
        for key, value in metrics.items():
            if value is not None:
                self._call("log_metric", mlflow.log_metric, key, float(value), step=n)

    def log_fit(self, slope: float, ci95, r2: float) -> None:
        self._call("log_metric", mlflow.log_metric, "slope", slope)
        self._call("log_metric", mlflow.log_metric, "slope_ci_low", ci95[0])
        self._call("log_metric", mlflow.log_metric, "slope_ci_high", ci95[1])
        self._call("log_metric", mlflow.log_metric, "r2", r2)

    def set_tags(self, tags: Dict[str, str]) -> None:
        for key, value in tags.items():
            self._call("set_tag", mlflow.set_tag, key, value)

    def log_artifacts(self, paths: Iterable[Optional[str]]) -> None:
        for path in paths:
            if path and os.path.exists(path):
                self._call("log_artifact", mlflow.log_artifact, path)

    def finish(self) -> None:
        self._call("end_run", mlflow.end_run)
        self.active = False
