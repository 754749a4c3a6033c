import json
import os

import pandas as pd
import pytest

from polyvar.cli import main, parse_args


@pytest.fixture
def fgn_config(write_config, tmp_path):
    return write_config(
        {
            "model": {"family": "fgn", "H": 0.6},
            "poly": {"kind": "hermite", "q": 2},
            "grid": {"n": [64, 128, 256], "replications": 100, "seed": 5},
            "bootstrap": {"resamples": 10},
            "output": {"dir": str(tmp_path / "out")},
        }
    )


def test_parse_args():
    args = parse_args(["rate-study", "--config", "study.yaml", "--workers", "4", "--seed", "7"])
    assert (args.command, args.config, args.workers, args.seed) == ("rate-study", "study.yaml", 4, 7)
    with pytest.raises(SystemExit):
        parse_args(["fit"])


def test_missing_config_is_invalid_input(tmp_path):
    assert main(["bounds", "--config", str(tmp_path / "absent.yaml")]) == 2


def test_simulate_then_estimate(fgn_config, tmp_path):
    out = tmp_path / "out"
    assert main(["simulate", "--config", fgn_config, "--n", "2048"]) == 0
    path = out / "fgn-hermite2-stationary_path.csv"
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["index", "value"]
    assert len(frame) == 2048

    assert main(["estimate", "--config", fgn_config, "--input", str(path)]) == 0
    result = json.loads((out / "fgn-hermite2-stationary_estimate.json").read_text())
    assert abs(result["estimate"] - 1.0) < 0.25


def test_simulate_is_reproducible(fgn_config, tmp_path):
    main(["simulate", "--config", fgn_config, "--n", "128", "--out", str(tmp_path / "a")])
    main(["simulate", "--config", fgn_config, "--n", "128", "--out", str(tmp_path / "b")])
    a = pd.read_csv(tmp_path / "a" / "fgn-hermite2-stationary_path.csv")
    b = pd.read_csv(tmp_path / "b" / "fgn-hermite2-stationary_path.csv")
    pd.testing.assert_frame_equal(a, b)


def test_estimate_needs_input(fgn_config):
    assert main(["estimate", "--config", fgn_config]) == 2


def test_cumulants_and_bounds(fgn_config, tmp_path):
    out = tmp_path / "out"
    assert main(["cumulants", "--config", fgn_config]) == 0
    cumulants = pd.read_csv(out / "fgn-hermite2-stationary_cumulants.csv")
    assert list(cumulants["n"]) == [64, 128, 256]
    assert cumulants["kappa4_F"].is_monotonic_decreasing

    assert main(["bounds", "--config", fgn_config]) == 0
    bounds = pd.read_csv(out / "fgn-hermite2-stationary_bounds.csv")
    assert (bounds["rate_class"] == "sqrt_n").all()
    assert bounds["tv_bound"].is_monotonic_decreasing


def test_rate_study(fgn_config, tmp_path):
    assert main(["rate-study", "--config", fgn_config]) == 0
    for suffix in (".csv", ".json", "_loglog.csv"):
        assert os.path.exists(tmp_path / "out" / f"fgn-hermite2-stationary{suffix}")


def test_rate_study_numeric_failure_exit_code(write_config, tmp_path):
    path = write_config(
        {
            "model": {"family": "fgn", "H": 0.8},
            "grid": {"n": [32, 64, 128], "replications": 100},
            "statistic": {"normalization": "asymptotic_variance"},
            "output": {"dir": str(tmp_path / "out")},
        }
    )
    assert main(["rate-study", "--config", path]) == 3
