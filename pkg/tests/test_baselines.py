import numpy as np
import pytest
from scipy.stats import norm, t as student_t

from elimpute.baselines import (
    complete_case_ols,
    complete_case_sample,
    el_complete_case,
    el_full_data,
    fisher_z_interval,
    weighted_gmm,
    wgmm_ci_normal,
)
from elimpute.el_core import mele
from elimpute.errors import DataValidationError, DomainError
from elimpute.estimating_functions import correlation_fn, linreg_fn, mean_fn
from elimpute.imputation import impute
from elimpute.kernel_smoothing import KernelSpec

KERNEL = KernelSpec(bandwidth=0.5)


def test_complete_case_sample(mar_data):
    """Complete-case sample keeps only observed rows and has no draws"""
    es = complete_case_sample(mar_data)
    assert es.n == mar_data.n_complete
    assert es.draws.shape[0] == 0


def test_el_complete_case_mean(mar_data):
    """Complete-case MELE of the mean is the observed-row average"""
    fit = el_complete_case(mar_data, mean_fn())
    assert fit.theta_hat[0] == pytest.approx(np.nanmean(mar_data.y[:, 0]), abs=1e-8)


def test_el_complete_case_needs_rows(tiny_data):
    """Too few complete rows for the estimating function is rejected"""
    with pytest.raises(DataValidationError):
        el_complete_case(tiny_data.subset([0, 4, 5]), correlation_fn())


def test_el_full_data_rejects_missing(mar_data, complete_data):
    """Full-data EL refuses data with missing rows"""
    with pytest.raises(DataValidationError):
        el_full_data(mar_data, mean_fn())
    fit = el_full_data(complete_data, mean_fn())
    assert fit.theta_hat[0] == pytest.approx(complete_data.y[:, 0].mean(), abs=1e-8)


def test_weighted_gmm_mean_is_hajek_estimator(mar_data):
    """IPW GMM for the mean is the Hajek ratio estimator"""
    w = weighted_gmm(mar_data, mean_fn(), KERNEL)
    rows = mar_data.complete_index
    inverse = 1.0 / w.propensity.values[rows]
    expected = np.sum(inverse * mar_data.y[rows, 0]) / np.sum(inverse)
    assert w.theta_tilde[0] == pytest.approx(expected, abs=1e-6)
    assert w.n_complete == mar_data.n_complete
    assert w.covariance[0, 0] > 0


def test_unit_propensity_gives_complete_case_estimate(mar_data):
    """Unit propensities reduce weighted GMM to complete-case OLS"""
    w = weighted_gmm(mar_data, linreg_fn(), KERNEL, propensity_values=np.ones(mar_data.n))
    rows = mar_data.complete_index
    design = np.column_stack([np.ones(len(rows)), mar_data.y[rows, 0]])
    ols, *_ = np.linalg.lstsq(design, mar_data.x[rows, 0], rcond=None)
    np.testing.assert_allclose(w.theta_tilde, ols, atol=1e-6)


def test_weighted_gmm_default_kernel(mar_data):
    """Cross-validated propensity kernel gives a finite estimate and normal interval"""
    w = weighted_gmm(mar_data, mean_fn())
    assert np.isfinite(w.theta_tilde).all()
    result = wgmm_ci_normal(w, 0.05)
    interval = result.intervals[0]
    assert interval.name == "mean"
    assert interval.lower < w.theta_tilde[0] < interval.upper
    assert result.method == "normal"


def test_just_identified_gmm_ignores_the_weighting_matrix(mar_data):
    """With r = p the moments vanish at the optimum for any positive definite A"""
    root = np.random.default_rng(9).normal(size=(2, 2)) + 2.0 * np.eye(2)
    identity = weighted_gmm(mar_data, linreg_fn(), KERNEL)
    weighted = weighted_gmm(mar_data, linreg_fn(), KERNEL, A=root @ root.T)
    np.testing.assert_allclose(weighted.theta_tilde, identity.theta_tilde, atol=1e-6)


def test_estimators_agree_without_missing_data(complete_data):
    """On fully observed data every estimator reduces to the full-data MELE"""
    g = linreg_fn()
    imputed = mele(impute(complete_data, KERNEL, kappa=5, seed=1), g).theta_hat
    np.testing.assert_allclose(el_full_data(complete_data, g).theta_hat, imputed, atol=1e-6)
    np.testing.assert_allclose(el_complete_case(complete_data, g).theta_hat, imputed, atol=1e-6)
    np.testing.assert_allclose(weighted_gmm(complete_data, g, KERNEL).theta_tilde, imputed, atol=1e-6)


def test_weighting_matrix_checked(mar_data):
    """Asymmetric or negative weighting matrices are rejected"""
    with pytest.raises(DataValidationError):
        weighted_gmm(mar_data, linreg_fn(), KERNEL, A=np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(DataValidationError):
        weighted_gmm(mar_data, linreg_fn(), KERNEL, A=-np.eye(2))


def test_complete_case_ols(mar_data):
    """OLS on complete rows with t intervals"""
    ols = complete_case_ols(mar_data, 0.05)
    rows = mar_data.complete_index
    slope, intercept = np.polyfit(mar_data.y[rows, 0], mar_data.x[rows, 0], 1)
    np.testing.assert_allclose(ols.estimate, [intercept, slope], atol=1e-8)
    assert ols.df == len(rows) - 2
    quantile = student_t.ppf(0.975, ols.df)
    for interval, b, s in zip(ols.intervals, ols.estimate, ols.stderr):
        assert interval.upper - b == pytest.approx(quantile * s)
        assert interval.contains(b)


def test_fisher_z_interval():
    """Fisher z interval at r=0 and its skew away from zero"""
    interval = fisher_z_interval(0.0, 103, 0.05)
    half = np.tanh(norm.ppf(0.975) / 10.0)
    assert interval.lower == pytest.approx(-half)
    assert interval.upper == pytest.approx(half)
    skewed = fisher_z_interval(0.6, 50)
    assert skewed.upper - 0.6 < 0.6 - skewed.lower


def test_fisher_z_errors():
    """Fisher z needs n > 3 and |r| < 1"""
    with pytest.raises(DataValidationError):
        fisher_z_interval(0.3, 3)
    with pytest.raises(DomainError):
        fisher_z_interval(1.0, 20)
