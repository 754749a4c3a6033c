import json
from pathlib import Path

import pytest
import yaml

from polyvar.config import (
    ExperimentConfig,
    config_from_dict,
    dump_config,
    load_config,
    resolve_config,
)
from polyvar.errors import ConfigError

CONFIG_DIR = Path(__file__).parent.parent / "config"


def test_load_yaml(write_config):
    path = write_config(
        {
            "model": {"family": "fou", "H": 0.65, "theta": 2.0},
            "poly": {"kind": "power", "q": 2},
            "grid": {"n_min": 256, "n_max": 2048, "replications": 500, "seed": 9},
            "statistic": {"mode": "trimmed", "i0": 30},
            "distances": {"wasserstein1": True, "kolmogorov": False},
        }
    )
    config = load_config(path).validate()
    assert config.n_grid == [256, 512, 1024, 2048]
    assert config.replications == 500 and config.seed == 9
    assert config.distances == ["wasserstein1"]
    assert config.run_name == "fou-power2-trimmed30"
    model = config.model.build()
    assert model.label() == "fou(H=0.65, theta=2.0)"


def test_load_json(tmp_path):
    path = tmp_path / "study.json"
    path.write_text(json.dumps({"model": {"family": "fgn", "H": 0.7}, "grid": {"n": [64, 128]}}))
    config = load_config(str(path))
    assert config.n_grid == [64, 128]
    assert config.model.family == "fgn"


def test_empty_file_gives_defaults(write_config):
    config = load_config(write_config({}))
    assert config == ExperimentConfig()


@pytest.mark.parametrize(
    "document,key",
    [
        ({"models": {}}, None),
        ({"model": {"hurst": 0.6}}, "model"),
        ({"grid": {"reps": 10}}, "grid.reps"),
        ({"grid": {"n": 128}}, "grid.n"),
        ({"grid": {"n_min": 128}}, "grid.n_max"),
        ({"distances": {"energy": True}}, "distances"),
        ({"statistic": ["mode"]}, "statistic"),
    ],
)
def test_malformed_documents(document, key):
    with pytest.raises(ConfigError) as info:
        config_from_dict(document)
    assert info.value.key == key


@pytest.mark.parametrize(
    "section,values,key",
    [
        ("statistic", {"mode": "sliding"}, "statistic.mode"),
        ("statistic", {"normalization": "median"}, "statistic.normalization"),
        ("statistic", {"component": "sigma"}, "statistic.component"),
        ("statistic", {"mode": "trimmed"}, "statistic.i0"),
        ("statistic", {"mode": "finite_diff"}, "statistic.p"),
        ("grid", {"n": [64, 32]}, "grid.n"),
        ("grid", {"n": [1, 32]}, "grid.n"),
        ("grid", {"replications": 50}, "grid.replications"),
        ("grid", {"seed": -1}, "grid.seed"),
        ("execution", {"workers": 0}, "execution.workers"),
        ("execution", {"max_failure_rate": 1.0}, "execution.max_failure_rate"),
        ("bootstrap", {"resamples": -5}, "bootstrap.resamples"),
    ],
)
def test_validation(section, values, key):
    config = config_from_dict({section: values})
    with pytest.raises(ConfigError) as info:
        config.validate()
    assert info.value.key == key


def test_few_replications_allowed_without_distances():
    config = config_from_dict(
        {"grid": {"replications": 10}, "distances": {"wasserstein1": False, "kolmogorov": False}}
    )
    assert config.validate().distances == []


def test_model_errors_carry_key():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"model": {"family": "oufou", "H": 0.6, "theta": 1.0, "rho": 1.0}}).model.build()
    assert info.value.key == "model"
    with pytest.raises(ConfigError) as info:
        config_from_dict({"model": {"family": "tabulated"}}).model.build()
    assert info.value.key == "model.table"
    with pytest.raises(ConfigError):
        config_from_dict({"poly": {"kind": "general"}}).poly.build()


def test_general_polynomial_degree():
    config = config_from_dict({"poly": {"kind": "general", "coeffs": [1.0, 0.0, 2.0, 0.0, 1.0]}})
    assert config.poly.degree == 4
    assert config.poly.build().degree == 4


def test_run_names():
    assert ExperimentConfig(mode="finite_diff", p=2).run_name == "fou-hermite2-diff2"
    assert ExperimentConfig(name="custom").run_name == "custom"
    assert ExperimentConfig().run_name == "fou-hermite2-stationary"


def test_precedence(write_config, monkeypatch):
    path = write_config({"grid": {"seed": 1}, "output": {"dir": "from-file"}})
    assert resolve_config(path).seed == 1
    monkeypatch.setenv("POLYVAR_SEED", "2")
    monkeypatch.setenv("POLYVAR_OUT_DIR", "from-env")
    config = resolve_config(path)
    assert (config.seed, config.out_dir) == (2, "from-env")
    config = resolve_config(path, seed=3, out_dir="from-cli", workers=2)
    assert (config.seed, config.out_dir, config.workers) == (3, "from-cli", 2)


def test_bad_environment_value(monkeypatch):
    monkeypatch.setenv("POLYVAR_WORKERS", "many")
    with pytest.raises(ConfigError) as info:
        resolve_config()
    assert info.value.key == "POLYVAR_WORKERS"


def test_missing_and_unparsable_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.yaml"))
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_dump_config(tmp_path, small_study):
    config = small_study(model={"family": "fou", "H": 0.55, "theta": 0.5})
    out = tmp_path / "dump.yaml"
    dump_config(config, str(out))
    document = yaml.safe_load(out.read_text())
    assert document["model"]["theta"] == 0.5
    assert document["n_grid"] == [32, 64, 128]


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.iterdir()), ids=lambda p: p.name)
def test_shipped_configs_are_valid(path):
    config = load_config(str(path)).validate()
    config.model.build()
    config.poly.build()
