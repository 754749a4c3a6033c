import math

import numpy as np
import pandas as pd
import pytest
from scipy.special import gamma

from polyvar.cov_models import (
    ProcessModel,
    fgn_cov,
    fgn_kernel,
    finite_diff_kernel,
    fou2_cov,
    fou2_kernel,
    fou2_variance,
    fou_cov,
    fou_cross_cov,
    fou_kernel,
    laplace_g,
    load_tabulated_kernel,
    oufou_eta,
    oufou_kernels,
    summability_report,
    tabulated_kernel,
)
from polyvar.errors import (
    DegenerateParametersError,
    UnsupportedRegimeError,
    ValidationError,
)


# -- fractional Gaussian noise ------------------------------------------------


def test_fgn_cov_closed_form():
    assert fgn_cov(0.75, 1.0, 0) == pytest.approx(1.0)
    assert fgn_cov(0.75, 1.0, 1) == pytest.approx(math.sqrt(2.0) - 1.0, abs=1e-8)
    assert fgn_cov(0.5, 2.0, 3) == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(fgn_cov(0.7, 1.0, [-2, 2]), [fgn_cov(0.7, 1.0, 2)] * 2)


def test_fgn_tail_constant(fgn07):
    k = 2000
    expected = fgn07.tail_constant * k ** (-fgn07.tail_exponent)
    assert fgn07(k) == pytest.approx(expected, rel=1e-3)


def test_white_kernel_is_finite_support(white):
    np.testing.assert_array_equal(white.values(5), [1.0, 0, 0, 0, 0, 0])
    assert white.bm_satisfied


def test_hurst_checked():
    with pytest.raises(ValidationError):
        fgn_cov(1.0, 1.0, 1)
    with pytest.raises(ValidationError):
        fgn_cov(0.5, -1.0, 1)


# -- fOU ----------------------------------------------------------------------


def test_fou_variance_closed_form():
    assert fou_cov(1.0, 0.75, 0.0) == pytest.approx(0.75 * gamma(1.5), rel=1e-12)
    assert fou_cov(1.0, 0.75, 0.0) == pytest.approx(0.66467024, rel=1e-7)


def test_fou_cov_standard_ou():
    assert fou_cov(2.0, 0.5, 1.0) == pytest.approx(math.exp(-2.0) / 4.0, rel=1e-14)


def test_fou_cov_continuous_at_half():
    assert fou_cov(1.0, 0.5001, 1.0) == pytest.approx(math.exp(-1.0) / 2.0, rel=2e-3)


def test_fou_cross_cov_at_zero():
    # (H Gamma(2H) / 3)(1 + 2^{-1/2}) at H = 3/4
    expected = 0.75 * gamma(1.5) * (1.0 + 2.0**-0.5) / 3.0
    assert fou_cross_cov(1.0, 2.0, 0.75, 0.0) == pytest.approx(expected, rel=1e-12)
    assert fou_cross_cov(1.0, 2.0, 0.75, 0.0) == pytest.approx(0.378221, rel=1e-6)


@pytest.mark.parametrize("H", [0.5, 0.5 + 5e-5, 0.5 - 5e-5])
def test_both_routes_use_closed_form_near_half(H):
    expected = math.exp(-2.0) / 3.0
    assert fou_cross_cov(1.0, 2.0, H, 1.0) == pytest.approx(expected, rel=1e-4)
    assert fou_cross_cov(1.0, 2.0, H, 1.0, method="spectral") == pytest.approx(expected, rel=1e-12)
    assert fou_cov(1.5, H, 2.0) == pytest.approx(math.exp(-3.0) / 3.0, rel=1e-12)
    assert fou_kernel(1.5, H).tail_exponent == math.inf


@pytest.mark.parametrize("t", [0.5, 1.0, 3.0, 10.0])
def test_laplace_and_spectral_routes_agree(t):
    for m, mp in [(1.0, 1.0), (1.0, 2.5)]:
        laplace = fou_cross_cov(m, mp, 0.7, t)
        spectral = fou_cross_cov(m, mp, 0.7, t, method="spectral")
        assert laplace == pytest.approx(spectral, rel=1e-5)


def test_cross_cov_swaps_with_time_reversal():
    assert fou_cross_cov(1.0, 2.0, 0.65, -1.5) == pytest.approx(
        fou_cross_cov(2.0, 1.0, 0.65, 1.5), rel=1e-10
    )


def test_laplace_g_at_zero():
    H, m = 0.6, 1.7
    assert laplace_g(m, H, 0.0) == pytest.approx(H * gamma(2 * H) * m ** (1 - 2 * H))


def test_fou_kernel_tail():
    kernel = fou_kernel(1.0, 0.7)
    k = 100
    expected = kernel.tail_constant * k ** (-kernel.tail_exponent)
    assert kernel(k) == pytest.approx(expected, rel=1e-2)


def test_fou_kernel_exponential_at_half():
    kernel = fou_kernel(1.5, 0.5)
    np.testing.assert_allclose(kernel.values(4), np.exp(-1.5 * np.arange(5)) / 3.0)
    assert kernel.exponential_decay


def test_fou_unknown_method():
    with pytest.raises(ValidationError):
        fou_cross_cov(1.0, 1.0, 0.7, 1.0, method="simpson")


# -- OUFOU --------------------------------------------------------------------


def test_oufou_eta_standard_ou_limit():
    eta_x, eta_sigma = oufou_eta(1.0, 2.0, 0.5)
    assert eta_x == pytest.approx(1.0 / 6.0, rel=1e-12)
    assert eta_sigma == pytest.approx(1.0 / 12.0, rel=1e-12)
    eta_x, eta_sigma = oufou_eta(1.0, 2.0, 0.5001)
    assert eta_x == pytest.approx(1.0 / 6.0, rel=1e-3)
    assert eta_sigma == pytest.approx(1.0 / 12.0, rel=1e-3)


@pytest.mark.parametrize("H", [0.5, 0.7])
def test_oufou_kernels_match_eta(H):
    kernels = oufou_kernels(1.0, 2.0, H)
    assert kernels.kZ.r0 == pytest.approx(kernels.etaX, rel=1e-10)
    assert kernels.kSigma.r0 == pytest.approx(kernels.etaSigma, rel=1e-10)


@pytest.mark.parametrize("H", [0.5, 0.7])
def test_oufou_cross_vanishes_at_lag_zero(H):
    kernels = oufou_kernels(1.0, 2.0, H)
    assert kernels.cross(0) == pytest.approx(0.0, abs=1e-12)
    values = kernels.cross_values(3)
    assert values.size == 7
    assert values[3] == pytest.approx(0.0, abs=1e-12)
    assert values[4] == pytest.approx(kernels.cross(1), rel=1e-12)
    assert values[2] == pytest.approx(kernels.cross(-1), rel=1e-12)


def test_pair_matrices_transpose_symmetry():
    gam = oufou_kernels(1.0, 2.0, 0.6).pair_matrices(3)
    for k in range(1, 4):
        np.testing.assert_allclose(gam[3 - k], gam[3 + k].T)


def test_oufou_degenerate():
    with pytest.raises(DegenerateParametersError):
        oufou_kernels(1.0, 1.0, 0.6)


# -- fOU of the second kind ---------------------------------------------------


def test_fou2_variance():
    assert fou2_variance(1.0, 0.75) == pytest.approx(0.64951905, rel=1e-7)
    assert fou2_cov(1.0, 0.75, 0.0) == fou2_variance(1.0, 0.75)


def test_fou2_kernel_positive_definite_and_decaying():
    kernel = fou2_kernel(1.0, 0.7)
    r = kernel.values(10)
    assert np.all(np.diff(r) < 0)
    assert kernel.min_eigenvalue(16) > 0


def test_fou2_regime():
    with pytest.raises(UnsupportedRegimeError):
        fou2_variance(1.0, 0.4)
    with pytest.raises(ValidationError):
        fou2_variance(-1.0, 0.7)


# -- tabulated kernels and differences ----------------------------------------


def test_tabulated_kernel_from_csv(tmp_path):
    path = tmp_path / "kernel.csv"
    pd.DataFrame({"lag": [2, 0, 1], "value": [0.1, 1.0, 0.4]}).to_csv(path, index=False)
    kernel = load_tabulated_kernel(str(path))
    np.testing.assert_allclose(kernel.values(5), [1.0, 0.4, 0.1, 0.0, 0.0, 0.0])


def test_tabulated_kernel_validation(tmp_path):
    with pytest.raises(ValidationError):
        tabulated_kernel([1.0, 1.5])
    path = tmp_path / "gap.csv"
    pd.DataFrame({"lag": [0, 2], "value": [1.0, 0.2]}).to_csv(path, index=False)
    with pytest.raises(ValidationError):
        load_tabulated_kernel(str(path))


def test_finite_diff_of_white_noise(white):
    diffed = finite_diff_kernel(white, 1)
    np.testing.assert_allclose(diffed.values(3), [2.0, -1.0, 0.0, 0.0])
    second = finite_diff_kernel(white, 2)
    np.testing.assert_allclose(second.values(3), [6.0, -4.0, 1.0, 0.0])


def test_finite_diff_matches_differenced_covariance(fgn07):
    n = 12
    R = fgn07.toeplitz(n + 1)
    D = np.diff(np.eye(n + 1), axis=0)
    expected = (D @ R @ D.T)[0]
    np.testing.assert_allclose(finite_diff_kernel(fgn07, 1).values(n - 1), expected, atol=1e-12)


def test_finite_diff_raises_tail_exponent(fgn07):
    diffed = finite_diff_kernel(fgn07, 1)
    assert diffed.tail_exponent == pytest.approx(fgn07.tail_exponent + 2)
    assert diffed.params["diff_order"] == 1


# -- summability --------------------------------------------------------------


def test_summability_white(white):
    report = summability_report(white, 64)
    assert report.u_f2_partial == pytest.approx(2.0)
    assert report.bm_satisfied
    assert report.tail_bound(10) == 0.0


@pytest.mark.parametrize("H,expected", [(0.6, True), (0.75, False), (0.8, False)])
def test_breuer_major_from_tail(H, expected):
    assert summability_report(fgn_kernel(H, 1.0), 256).bm_satisfied is expected


def test_summability_nmax_checked(white):
    with pytest.raises(ValidationError):
        summability_report(white, 8)


# -- models -------------------------------------------------------------------


def test_process_model_validation():
    with pytest.raises(ValidationError):
        ProcessModel("levy", H=0.6)
    with pytest.raises(ValidationError):
        ProcessModel("fou", H=0.6)
    with pytest.raises(DegenerateParametersError):
        ProcessModel("oufou", H=0.6, theta=1.0, rho=1.0)
    with pytest.raises(UnsupportedRegimeError):
        ProcessModel("fou2", H=0.4, alpha=1.0)


def test_process_model_properties():
    fou = ProcessModel("fou", H=0.6, theta=2.0)
    assert not fou.stationary
    assert fou.decay_rate == 2.0
    assert fou.label() == "fou(H=0.6, theta=2.0)"
    pair = ProcessModel("oufou", H=0.6, theta=1.0, rho=3.0)
    assert pair.decay_rate == 1.0
    assert pair.companion_kernel().name == "oufou_sigma"
    assert ProcessModel("fgn", H=0.7).stationary
