import json
import math

import numpy as np
import pytest

from polyvar.cov_models import fgn_kernel, finite_diff_kernel, fou_kernel, tabulated_kernel
from polyvar.errors import ValidationError, WindowError
from polyvar.exact_sampler import SamplePath
from polyvar.hermite_basis import variation_poly
from polyvar.variation_stats import (
    align_poly,
    exact_var_U,
    finite_diff_path,
    q_variation,
    quad_cumulants,
    toeplitz_traces,
    trimmed_variation,
    u_limit,
    u_statistic,
    variance_discrepancy,
    variation_report,
)


def _brute_cumulants(kernel, n):
    lam = np.linalg.eigvalsh(kernel.toeplitz(n))
    return tuple(
        2 ** (m - 1) * math.factorial(m - 1) * np.sum(lam**m) / n ** (m / 2)
        for m in (2, 3, 4)
    )


def test_q_variation_and_trimming():
    square = variation_poly("power", 2, 1.0)
    values = np.array([1.0, 2.0, 3.0, 4.0])
    assert q_variation(values, square) == pytest.approx(7.5)
    assert trimmed_variation(values, square, 1) == pytest.approx(29.0 / 3.0)
    assert trimmed_variation(values, square, 1, 2) == pytest.approx(6.5)
    with pytest.raises(WindowError):
        trimmed_variation(values, square, 3, 2)
    with pytest.raises(WindowError):
        trimmed_variation(values, square, -1)


def test_u_statistic():
    assert u_statistic(1.5, 1.0, 16) == pytest.approx(2.0)


def test_finite_diff_path():
    path = SamplePath(
        values=np.array([0.0, 1.0, 3.0, 6.0]),
        model=None,
        seed=0,
        stationary=True,
        companion=np.array([1.0, 1.0, 2.0, 4.0]),
    )
    diffed = finite_diff_path(path, 1)
    np.testing.assert_allclose(diffed.values, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(diffed.companion, [0.0, 1.0, 2.0])
    assert diffed.diff_order == 1
    np.testing.assert_allclose(finite_diff_path(diffed, 1).values, [1.0, 1.0])
    with pytest.raises(WindowError):
        finite_diff_path(path, 4)


def test_exact_var_U_white(white):
    square = variation_poly("power", 2, 1.0)
    for n in (1, 10, 100):
        assert exact_var_U(square, white, n) == pytest.approx(2.0)
    quartic = variation_poly("power", 4, 1.0)
    # Var(Z^4) = 105 - 9
    assert exact_var_U(quartic, white, 50) == pytest.approx(96.0)


@pytest.mark.parametrize("n", [2, 17, 64])
def test_exact_var_U_brute_force(fgn07, n):
    R = fgn07.toeplitz(n)
    expected = 2.0 * np.sum(R**2) / n
    assert exact_var_U(variation_poly("power", 2, 1.0), fgn07, n) == pytest.approx(expected, rel=1e-12)


def test_exact_var_U_realigns_polynomial():
    kernel = fgn_kernel(0.6, 2.0)
    poly = variation_poly("power", 2, 1.0)
    R = kernel.toeplitz(20)
    assert exact_var_U(poly, kernel, 20) == pytest.approx(2.0 * np.sum(R**2) / 20, rel=1e-12)
    assert align_poly(poly, 2.0).ref_var == 2.0


def test_u_limit_white(white):
    limit = u_limit(variation_poly("power", 2, 1.0), white)
    assert not limit.diverges
    assert float(limit) == pytest.approx(2.0)


def test_u_limit_diverges_without_breuer_major():
    limit = u_limit(variation_poly("hermite", 2, 1.0), fgn_kernel(0.8, 1.0))
    assert limit.diverges
    assert math.isinf(limit.value)


def test_u_limit_quartic_uses_fourth_power_sums():
    limit = u_limit(variation_poly("hermite", 4, 1.0), fgn_kernel(0.7, 1.0))
    assert not limit.diverges
    assert limit.value > 24.0


def test_u_limit_dominates_partial_variance():
    poly = variation_poly("hermite", 2, 1.0)
    limit = u_limit(poly, fgn_kernel(0.6, 1.0))
    exact = exact_var_U(poly, fgn_kernel(0.6, 1.0), 4096)
    assert exact < limit.value
    assert limit.value == pytest.approx(exact, rel=0.05)


def test_variance_discrepancy_identity():
    kernel = fgn_kernel(0.6, 1.0)
    poly = variation_poly("hermite", 2, 1.0)
    limit = u_limit(poly, kernel)
    n = 64
    expected = 1.0 - exact_var_U(poly, kernel, n) / limit.value
    assert variance_discrepancy(poly, kernel, n, limit) == pytest.approx(expected, rel=1e-8)


def test_variance_discrepancy_white_is_zero(white):
    assert variance_discrepancy(variation_poly("power", 2, 1.0), white, 32) == pytest.approx(0.0, abs=1e-15)


def test_quad_cumulants_white(white):
    one = quad_cumulants(white, 1)
    assert (one.kappa2, one.kappa3, one.kappa4) == pytest.approx((2.0, 8.0, 48.0))
    two = quad_cumulants(white, 2)
    assert two.kappa2 == pytest.approx(2.0)
    assert two.kappa3 == pytest.approx(4.0 * math.sqrt(2.0))
    assert two.kappa4 == pytest.approx(24.0)
    assert quad_cumulants(white, 100).kappa4_F == pytest.approx(0.12)


@pytest.mark.parametrize("n", [5, 40, 200])
def test_quad_cumulants_match_eigenvalues(fgn07, n):
    report = quad_cumulants(fgn07, n)
    expected = _brute_cumulants(fgn07, n)
    assert (report.kappa2, report.kappa3, report.kappa4) == pytest.approx(expected, rel=1e-9)


def test_toeplitz_traces_fft_path_matches_dense():
    r = fou_kernel(1.0, 0.65).values(299)
    dense = toeplitz_traces(r)
    blocked = toeplitz_traces(r, dense_max=0)
    assert blocked == pytest.approx(dense, rel=1e-9)


def test_quad_cumulants_of_differences(fgn07):
    diffed = finite_diff_kernel(fgn07, 1)
    report = quad_cumulants(diffed, 30)
    assert (report.kappa2, report.kappa3, report.kappa4) == pytest.approx(_brute_cumulants(diffed, 30), rel=1e-9)


def _random_ma_kernel(seed):
    # autocovariance of a random moving-average filter is positive semidefinite
    rng = np.random.default_rng(seed)
    taps = rng.standard_normal(rng.integers(1, 7))
    r = np.correlate(taps, taps, mode="full")[taps.size - 1 :]
    return tabulated_kernel(r, name=f"ma{seed}")


@pytest.mark.parametrize("n", [2, 4, 8, 16])
@pytest.mark.parametrize("seed", range(10))
def test_quad_cumulants_random_kernels(seed, n):
    kernel = _random_ma_kernel(seed)
    report = quad_cumulants(kernel, n)
    expected = _brute_cumulants(kernel, n)
    assert (report.kappa2, report.kappa3, report.kappa4) == pytest.approx(expected, rel=1e-9)


def test_quad_cumulants_n_checked(white):
    with pytest.raises(ValidationError):
        quad_cumulants(white, 0)


def test_variation_report(tmp_path, white, rng):
    values = rng.standard_normal(400)
    poly = variation_poly("power", 2, 1.0)
    report = variation_report(values, poly, white, 1.0)
    assert report.n == 400
    assert report.Q == pytest.approx(np.mean(values**2))
    assert report.U == pytest.approx(20.0 * (report.Q - 1.0))
    assert report.F == pytest.approx(report.U / math.sqrt(2.0))
    assert report.kappa4_F == pytest.approx(0.03)
    out = tmp_path / "report.json"
    text = report.to_json(str(out))
    assert json.loads(out.read_text()) == json.loads(text)


def test_variation_report_marks_divergence(rng):
    kernel = fgn_kernel(0.8, 1.0)
    report = variation_report(rng.standard_normal(64), variation_poly("hermite", 2, 1.0), kernel, 0.0)
    assert report.u_limit_diverges
    assert report.to_dict()["u_limit"] is None
