import math
import os

import numpy as np
import pandas as pd
import pytest
from scipy.optimize import linear_sum_assignment

from polyvar import mc_harness
from polyvar.errors import ExperimentAbortedError, ValidationError
from polyvar.mc_harness import (
    CSV_COLUMNS,
    ChunkOutput,
    RateStudy,
    bootstrap_se,
    kolmogorov_to_normal,
    normal_quantiles,
    rate_fit,
    run_experiment,
    wasserstein1_to_normal,
)

# -- distances ----------------------------------------------------------------


def test_normal_quantiles_symmetric():
    q = normal_quantiles(101, 4.0)
    np.testing.assert_allclose(q, -q[::-1], atol=1e-12)
    assert q[50] == pytest.approx(0.0, abs=1e-12)


def test_wasserstein_on_quantile_grid_is_zero():
    M = 1000
    assert wasserstein1_to_normal(normal_quantiles(M)) == pytest.approx(0.0, abs=1e-12)
    assert wasserstein1_to_normal(normal_quantiles(M, 2.5), 2.5) == pytest.approx(0.0, abs=1e-12)


def test_wasserstein_of_shift():
    M = 500
    shifted = normal_quantiles(M) + 0.3
    assert wasserstein1_to_normal(shifted) == pytest.approx(0.3, rel=1e-12)


def test_wasserstein_matches_optimal_assignment(rng):
    x = rng.standard_t(df=4, size=60)
    grid = normal_quantiles(60)
    cost = np.abs(x[:, None] - grid[None, :])
    rows, cols = linear_sum_assignment(cost)
    assert wasserstein1_to_normal(x) == pytest.approx(cost[rows, cols].sum() / 60, rel=1e-12)


def test_kolmogorov_on_quantile_grid():
    M = 400
    assert kolmogorov_to_normal(normal_quantiles(M)) == pytest.approx(0.5 / M, rel=1e-6)
    assert 0.0 <= kolmogorov_to_normal(np.full(10, 3.0)) <= 1.0


def test_distance_input_checks():
    with pytest.raises(ValidationError):
        wasserstein1_to_normal([])
    with pytest.raises(ValidationError):
        kolmogorov_to_normal([0.0, 1.0], sigma2=0.0)


def test_bootstrap_se_reproducible(rng):
    x = rng.standard_normal(300)
    a = bootstrap_se(x, np.mean, np.random.default_rng(1), 100)
    b = bootstrap_se(x, np.mean, np.random.default_rng(1), 100)
    assert a == b
    assert a == pytest.approx(1.0 / math.sqrt(300), rel=0.3)
    assert math.isnan(bootstrap_se(x, np.mean, np.random.default_rng(1), 1))


# -- rate fit -----------------------------------------------------------------


@pytest.mark.parametrize("slope", [-0.5, -0.3])
def test_rate_fit_recovers_exact_power_law(slope):
    n = [2.0**k for k in range(8, 14)]
    fit = rate_fit([(m, 3.0 * m**slope) for m in n])
    assert fit.slope == pytest.approx(slope, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-10)
    assert fit.r2 == pytest.approx(1.0)
    assert fit.ci95[0] == pytest.approx(slope, abs=1e-9)
    assert fit.n_points == 6


def test_rate_fit_weights_do_not_bias_exact_data():
    n = [2.0**k for k in range(8, 13)]
    d = [m**-0.5 for m in n]
    fit = rate_fit(list(zip(n, d)), se=[0.1 * v * (1 + i) for i, v in enumerate(d)])
    assert fit.slope == pytest.approx(-0.5, abs=1e-12)


def test_rate_fit_drops_invalid_points():
    points = [(256, 0.1), (512, 0.0), (1024, 0.05), (2048, 0.0354), (4096, float("nan"))]
    fit = rate_fit(points)
    assert fit.n_points == 3
    with pytest.raises(ValidationError):
        rate_fit([(256, 0.1), (512, -1.0), (1024, 0.05)])


# -- studies ------------------------------------------------------------------


def test_small_study_outputs(small_study):
    config = small_study()
    result = run_experiment(config)
    frame = result.to_frame()
    assert list(frame.columns[: len(CSV_COLUMNS)]) == CSV_COLUMNS
    assert list(frame["n"]) == [32, 64, 128]
    assert (frame["M"] == 200).all()
    assert (frame["predicted_class"] == "sqrt_n").all()
    assert frame["dW_hat"].gt(0).all() and frame["dW_se"].gt(0).all()
    assert frame["tv_bound"].notna().all()
    for key in ("csv", "json", "loglog", "png"):
        assert os.path.exists(result.paths[key])
    loglog = pd.read_csv(result.paths["loglog"])
    np.testing.assert_allclose(np.exp(loglog["log_n"]), [32, 64, 128])
    assert result.fit is not None and result.fit.n_points == 3


def test_study_independent_of_chunking_and_workers(small_study):
    reference = run_experiment(small_study(), save=False)
    rechunked = run_experiment(small_study(execution={"chunk_size": 37}), save=False)
    parallel = run_experiment(small_study(execution={"chunk_size": 64, "workers": 2}), save=False)
    for other in (rechunked, parallel):
        np.testing.assert_allclose(
            [r.dW_hat for r in other.rows], [r.dW_hat for r in reference.rows], rtol=1e-12
        )


def test_study_reproducible_from_seed(small_study):
    a = run_experiment(small_study(grid={"n": [32, 64, 128]}), save=False)
    b = run_experiment(small_study(), save=False)
    c = run_experiment(small_study(grid={"seed": 4}), save=False)
    assert [r.dW_hat for r in a.rows] == [r.dW_hat for r in b.rows]
    assert [r.dW_hat for r in a.rows] != [r.dW_hat for r in c.rows]


def test_study_with_variance_estimation(small_study):
    result = run_experiment(small_study(estimation={"enabled": True}), save=False)
    for row in result.rows:
        assert abs(row.estimator_bias) < 0.1
        assert row.estimator_rmse > 0
        assert 0.8 <= row.estimator_coverage <= 1.0


def test_nonstationary_fou_study_reports_envelope(small_study):
    config = small_study(
        model={"family": "fou", "H": 0.5, "theta": 1.0},
        statistic={"mode": "nonstationary"},
        grid={"replications": 100},
    )
    result = run_experiment(config, save=False)
    assert all(r.w_bound is not None and r.w_bound > 0 for r in result.rows)


def test_trimmed_and_differenced_modes(small_study):
    trimmed = small_study(
        model={"family": "fou", "H": 0.5, "theta": 1.0},
        statistic={"mode": "trimmed", "i0": 10},
        grid={"replications": 100},
    )
    assert trimmed.run_name == "fou-hermite2-trimmed10"
    assert run_experiment(trimmed, save=False).rows[0].M == 100
    diffed = small_study(
        model={"family": "fgn", "H": 0.9}, statistic={"mode": "finite_diff", "p": 1}, grid={"replications": 100}
    )
    result = run_experiment(diffed, save=False)
    assert result.predicted_class == "sqrt_n"
    assert result.rows[0].var_U_exact is not None


def test_sigma_component_of_oufou(small_study):
    config = small_study(
        model={"family": "oufou", "H": 0.5, "theta": 1.0, "rho": 2.0},
        statistic={"component": "sigma"},
        grid={"replications": 100},
    )
    study = RateStudy(config)
    assert study.studied_kernel().name == "oufou_sigma"
    row = study.run_n(64)
    assert row.M == 100 and row.dW_hat > 0


def test_sigma_component_predicts_its_own_rate(small_study):
    config = small_study(
        model={"family": "oufou", "H": 0.7, "theta": 1.0, "rho": 2.0},
        statistic={"component": "sigma"},
        grid={"replications": 100},
    )
    row = RateStudy(config).run_n(32)
    assert row.predicted_class == "pow_6H_minus_4p5"
    z_config = small_study(
        model={"family": "oufou", "H": 0.7, "theta": 1.0, "rho": 2.0}, grid={"replications": 100}
    )
    z_row = RateStudy(z_config).run_n(32)
    assert z_row.predicted_class == "sqrt_n"


def test_asymptotic_normalization_without_breuer_major_fails(small_study):
    from polyvar.errors import DivergenceError

    config = small_study(model={"family": "fgn", "H": 0.8}, statistic={"normalization": "asymptotic_variance"})
    with pytest.raises(DivergenceError):
        RateStudy(config).run_n(32)


def test_none_normalization_compares_with_limit_variance(small_study):
    row = RateStudy(small_study(statistic={"normalization": "none"})).run_n(64)
    assert row.target_variance == pytest.approx(row.u_limit)


def test_study_aborts_on_failures(small_study, monkeypatch):
    def failing_chunk(task):
        return ChunkOutput(task.start, np.full(task.stop - task.start, np.nan), None, ["boom"])

    monkeypatch.setattr(mc_harness, "run_chunk", failing_chunk)
    with pytest.raises(ExperimentAbortedError):
        RateStudy(small_study()).run_n(32)


def test_differenced_estimation_limited_to_fou(small_study):
    config = small_study(statistic={"mode": "finite_diff", "p": 1}, estimation={"enabled": True})
    with pytest.raises(ValidationError):
        RateStudy(config).run_n(32)


# -- acceptance ---------------------------------------------------------------


@pytest.mark.slow
def test_optimal_rate_for_short_memory(small_study):
    config = small_study(
        model={"family": "fgn", "H": 0.6},
        grid={"n": [256, 512, 1024, 2048, 4096], "replications": 20000},
        bootstrap={"resamples": 100},
        execution={"chunk_size": 1000, "workers": 4},
    )
    result = run_experiment(config, save=False)
    assert result.predicted_slope == -0.5
    assert -0.8 < result.fit.slope < -0.25


@pytest.mark.slow
def test_wasserstein_below_certified_bound(small_study):
    config = small_study(
        model={"family": "fgn", "H": 0.7},
        grid={"n": [256, 1024, 4096], "replications": 5000},
        execution={"chunk_size": 1000, "workers": 4},
    )
    for row in run_experiment(config, save=False).rows:
        assert row.dW_hat < row.tv_bound


@pytest.mark.slow
def test_fou_drift_estimator_coverage(small_study):
    config = small_study(
        model={"family": "fou", "H": 0.6, "theta": 1.0},
        poly={"kind": "power", "q": 2},
        statistic={"mode": "nonstationary"},
        estimation={"enabled": True},
        grid={"n": [1024, 2048, 4096], "replications": 2000},
        execution={"chunk_size": 250, "workers": 4},
    )
    rows = run_experiment(config, save=False).rows
    assert abs(rows[-1].estimator_coverage - 0.95) < 0.05
    assert rows[-1].estimator_rmse < rows[0].estimator_rmse


@pytest.mark.slow
def test_oufou_joint_estimation(small_study):
    config = small_study(
        model={"family": "oufou", "H": 0.6, "theta": 1.0, "rho": 2.0},
        poly={"kind": "power", "q": 2},
        statistic={"mode": "nonstationary"},
        estimation={"enabled": True},
        distances={"wasserstein1": False, "kolmogorov": False},
        grid={"n": [4096], "replications": 1000},
        execution={"chunk_size": 250, "workers": 4, "max_failure_rate": 0.05},
    )
    row = run_experiment(config, save=False).rows[0]
    assert abs(row.estimator_bias) < 0.1
    assert abs(row.estimator_bias_2) < 0.2
    np.testing.assert_allclose(np.diag(row.estimator_cov), np.diag(row.predicted_cov), rtol=0.3)
