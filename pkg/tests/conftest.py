import numpy as np
import pytest
import yaml

from polyvar.config import config_from_dict
from polyvar.cov_models import fgn_kernel, white_kernel


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    """Keep log files and environment overrides out of the tests' way"""
    for name in (
        "POLYVAR_SEED",
        "POLYVAR_OUT_DIR",
        "POLYVAR_WORKERS",
        "POLYVAR_EXPERIMENT_NAME",
    ):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv("POLYVAR_LOG_DIR", str(tmp_path / "logs"))


@pytest.fixture
def white():
    return white_kernel(1.0)


@pytest.fixture
def fgn07():
    return fgn_kernel(0.7, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def write_config(tmp_path):
    """Write a config document to YAML and return its path"""

    def _write(document, name="experiment.yaml"):
        path = tmp_path / name
        with open(path, "w") as f:
            yaml.safe_dump(document, f)
        return str(path)

    return _write


@pytest.fixture
def small_study(tmp_path):
    """Cheap stationary fGN rate study, overridable per test"""

    def _build(**sections):
        document = {
            "model": {"family": "fgn", "H": 0.6},
            "poly": {"kind": "hermite", "q": 2},
            "grid": {"n": [32, 64, 128], "replications": 200, "seed": 3},
            "statistic": {"mode": "stationary"},
            "bootstrap": {"resamples": 20},
            "output": {"dir": str(tmp_path / "results")},
            "execution": {"chunk_size": 50},
        }
        for section, values in sections.items():
            document.setdefault(section, {}).update(values)
        return config_from_dict(document).validate()

    return _build
