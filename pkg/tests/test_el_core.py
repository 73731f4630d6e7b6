import numpy as np
import pytest
from scipy.optimize import bisect
from scipy.stats import chi2

from elimpute.dataset import Dataset
from elimpute.el_core import ELProfile, default_starts, dual_hessian, el_ratio, el_weights, mele, solve_lagrange
from elimpute.errors import DataValidationError, EvaluationError, HullError
from elimpute.estimating_functions import EstimatingFunction, correlation_fn, linreg_fn, logistic_fn, logistic_irls, mean_fn
from elimpute.imputation import ExtendedSample, impute
from elimpute.kernel_smoothing import KernelSpec


def scalar_oracle(G):
    """Root of sum G_i / (1 + t G_i) on the feasibility interval, by bisection"""
    G = np.asarray(G, dtype=float)
    lower = -1.0 / G.max() + 1e-12
    upper = -1.0 / G.min() - 1e-12
    t = bisect(lambda t: np.sum(G / (1.0 + t * G)), lower, upper, xtol=1e-14)
    return t, float(np.sum(np.log(1.0 + t * G)))


def sample(y, x=None):
    y = np.asarray(y, dtype=float)
    x = np.zeros((len(y), 1)) if x is None else x
    return ExtendedSample.from_complete(Dataset.from_arrays(x, y))


class OverIdentified(EstimatingFunction):
    """g = (z - theta, z^2 - theta^2 - 1)"""

    name = "overidentified"

    def __init__(self):
        super().__init__(2, 1, ["theta"])

    def evaluate(self, x, y, theta):
        (t,) = self._require(theta)
        z = np.asarray(y)[:, 0]
        return np.column_stack([z - t, z * z - t * t - 1.0])

    def jacobian(self, x, y, theta):
        (t,) = self._require(theta)
        jac = np.zeros((len(y), 2, 1))
        jac[:, 0, 0] = -1.0
        jac[:, 1, 0] = -2.0 * t
        return jac

    def default_start(self, data):
        return data.y[data.complete_index, :1].mean(axis=0)


def test_centered_rows_give_zero_multiplier():
    """Rows already centered at zero give t = 0 and uniform weights"""
    sol = solve_lagrange(np.array([[-1.0], [0.0], [1.0]]))
    assert sol.feasible
    assert sol.t[0] == pytest.approx(0.0, abs=1e-12)
    assert sol.logelr == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(el_weights(np.array([[-1.0], [0.0], [1.0]]), sol.t), 1.0 / 3.0)


def test_scalar_multiplier_matches_bisection():
    """Newton multiplier matches bisection on a three-row sample"""
    G = np.array([-1.5, -0.5, 0.5])
    sol = solve_lagrange(G[:, None])
    t, logelr = scalar_oracle(G)
    assert sol.feasible
    assert sol.t[0] == pytest.approx(t, abs=1e-8)
    assert sol.logelr == pytest.approx(logelr, rel=1e-8)
    assert sol.logelr > 0


def test_random_scalar_instances_match_bisection():
    """100 random one-column samples agree with the bisection oracle"""
    for seed in range(100):
        G = np.random.default_rng(seed).normal(0.2, 1.0, size=30)
        sol = solve_lagrange(G[:, None])
        t, logelr = scalar_oracle(G)
        assert sol.feasible, seed
        assert sol.t[0] == pytest.approx(t, rel=1e-8, abs=1e-10), seed
        assert sol.logelr == pytest.approx(logelr, rel=1e-8, abs=1e-10), seed


def test_normal_samples_are_always_feasible():
    """Samples whose hull holds zero are never reported infeasible"""
    for seed in range(300):
        y = np.random.default_rng(seed).normal(size=200)
        sol = solve_lagrange(y[:, None])
        assert sol.feasible, seed
        assert np.isfinite(sol.logelr), seed


@pytest.mark.parametrize("estfun", ["mean", "linreg"])
def test_wilks_coverage_on_full_data(estfun):
    """{theta: 2 l_n(theta) <= chi2_p(0.95)} covers the truth about 95% of the time"""
    g = mean_fn() if estfun == "mean" else linreg_fn()
    theta0 = np.array([0.0]) if estfun == "mean" else np.array([1.0, 2.0])
    threshold = chi2.ppf(0.95, g.p)
    covered = 0
    R = 1000
    for rep in range(R):
        rng = np.random.default_rng(1000 + rep)
        y = rng.normal(size=200)
        x = 1.0 + 2.0 * y + rng.normal(size=200)
        sol = solve_lagrange(g.evaluate(x[:, None], y[:, None], theta0))
        assert sol.feasible, rep
        covered += 2.0 * sol.logelr <= threshold
    assert 0.93 <= covered / R <= 0.97


def test_same_sign_rows_are_infeasible():
    """Zero outside the hull gives an infinite log ratio"""
    sol = solve_lagrange(np.array([[0.5], [1.0], [2.0]]))
    assert not sol.feasible
    assert sol.logelr == float("inf")


def test_lagrange_input_checks():
    """Short or non-finite inputs raise"""
    with pytest.raises(DataValidationError):
        solve_lagrange(np.ones((2, 2)))
    with pytest.raises(EvaluationError):
        solve_lagrange(np.array([[1.0], [np.nan], [-1.0]]))


def test_weights_and_dual_concavity():
    """Weights sum to one, balance G, and the dual Hessian is negative"""
    rng = np.random.default_rng(2)
    G = rng.normal(size=(50, 3)) + 0.1
    sol = solve_lagrange(G)
    assert sol.feasible
    p = el_weights(G, sol.t)
    assert p.sum() == pytest.approx(1.0, abs=1e-8)
    np.testing.assert_allclose(p @ G, 0.0, atol=1e-8)
    assert np.linalg.eigvalsh(dual_hessian(G, sol.t)).max() <= 1e-12


def test_el_ratio_for_the_mean():
    """Log EL ratio for the mean at, near and outside the hull"""
    es = sample([1.0, 2.0, 3.0])
    g = mean_fn()
    assert el_ratio(es, g, [2.0]) == pytest.approx(0.0, abs=1e-12)
    _, logelr = scalar_oracle(np.array([-1.5, -0.5, 0.5]))
    assert el_ratio(es, g, [2.5]) == pytest.approx(logelr, rel=1e-8)
    assert el_ratio(es, g, [5.0]) == float("inf")


def test_mele_full_data_mean(complete_data):
    """Full-data MELE of the mean is the sample mean"""
    fit = mele(ExtendedSample.from_complete(complete_data), mean_fn())
    assert fit.theta_hat[0] == pytest.approx(complete_data.y[:, 0].mean(), abs=1e-8)
    assert fit.logelr == pytest.approx(0.0, abs=1e-10)
    assert fit.converged
    assert fit.param_names == ("mean",)


def test_mele_exact_line():
    """Noise-free line is recovered exactly"""
    y = np.arange(10.0)
    x = (1.0 + 2.0 * y)[:, None]
    es = ExtendedSample.from_complete(Dataset.from_arrays(x, y))
    g = linreg_fn()
    fit = mele(es, g, starts=[g.default_start(es.base)])
    np.testing.assert_allclose(fit.theta_hat, [1.0, 2.0], atol=1e-10)


def test_mele_full_data_linreg_is_ols(complete_data):
    """Full-data linreg MELE is OLS"""
    fit = mele(ExtendedSample.from_complete(complete_data), linreg_fn())
    design = np.column_stack([np.ones(complete_data.n), complete_data.y[:, 0]])
    ols, *_ = np.linalg.lstsq(design, complete_data.x[:, 0], rcond=None)
    np.testing.assert_allclose(fit.theta_hat, ols, atol=1e-8)


def test_mele_full_data_correlation_is_plug_in(complete_data):
    """Full-data correlation MELE is the plug-in moments"""
    fit = mele(ExtendedSample.from_complete(complete_data), correlation_fn())
    x, y = complete_data.x[:, 0], complete_data.y[:, 0]
    expected = [np.corrcoef(x, y)[0, 1], x.mean(), y.mean(), np.var(x), np.var(y)]
    np.testing.assert_allclose(fit.theta_hat, expected, atol=1e-8)


def test_mele_full_data_logistic_is_mle():
    """Full-data logistic MELE is the IRLS MLE"""
    rng = np.random.default_rng(5)
    n = 300
    x1, x2, y = rng.normal(size=n), rng.normal(size=n), rng.integers(0, 2, size=n).astype(float)
    s = np.column_stack([np.ones(n), x1, x2, y])
    response = (rng.random(n) < 1.0 / (1.0 + np.exp(-s @ [-0.5, 1.0, 0.5, -1.0]))).astype(float)
    data = Dataset.from_arrays(np.column_stack([x1, x2, response]), y, x_kinds=["continuous", "continuous", "binary"])
    fit = mele(ExtendedSample.from_complete(data), logistic_fn((0, 1), 2))
    np.testing.assert_allclose(fit.theta_hat, logistic_irls(s, response), atol=1e-6)


def test_just_identified_moments_vanish(complete_data):
    """Just-identified MELE zeroes the average estimating function"""
    g = correlation_fn()
    es = ExtendedSample.from_complete(complete_data)
    fit = mele(es, g)
    G = g.evaluate(complete_data.x, complete_data.y, fit.theta_hat)
    assert np.linalg.norm(G.mean(axis=0)) <= 1e-8


def test_overidentified_matches_grid_search():
    """Over-identified MELE agrees with a refined grid search"""
    rng = np.random.default_rng(17)
    es = sample(0.5 + rng.normal(size=20))
    g = OverIdentified()
    fit = mele(es, g)

    profile = ELProfile(es, g, cache_size=0)
    center = 0.0
    for low, high, step in ((-3.0, 3.0, 1e-2), (-2e-2, 2e-2, 1e-4), (-2e-4, 2e-4, 1e-5)):
        grid = center + np.arange(low, high, step)
        center = grid[int(np.argmin([profile.logelr([t]) for t in grid]))]
    best = center
    assert fit.theta_hat[0] == pytest.approx(best, abs=1e-4)
    assert fit.logelr > 0


def test_shift_equivariance(complete_data):
    """Shifting y shifts the mean estimate by the same amount"""
    base = mele(ExtendedSample.from_complete(complete_data), mean_fn())
    shifted = Dataset.from_arrays(complete_data.x, complete_data.y + 3.25)
    moved = mele(ExtendedSample.from_complete(shifted), mean_fn())
    assert moved.theta_hat[0] - base.theta_hat[0] == pytest.approx(3.25, abs=1e-8)


def test_profile_increases_away_from_estimate(mar_data):
    """Profile log ratio grows monotonically away from theta-hat"""
    es = impute(mar_data, KernelSpec(bandwidth=0.4), kappa=10, seed=3)
    g = mean_fn()
    fit = mele(es, g)
    profile = ELProfile(es, g)
    for direction in (1.0, -1.0):
        values = [profile.logelr(fit.theta_hat + direction * k * 0.05) for k in range(40)]
        finite = [v for v in values if np.isfinite(v)]
        assert finite[0] == pytest.approx(0.0, abs=1e-8)
        assert np.all(np.diff(finite) >= -1e-10)


def test_hull_error_when_every_start_is_infeasible():
    """HullError when no start has zero in the hull"""
    es = sample([1.0, 2.0, 3.0, 4.0])
    with pytest.raises(HullError):
        mele(es, mean_fn(), starts=[[100.0], [-50.0]])


def test_no_admissible_start():
    """Inadmissible starts only is an input error"""
    es = sample([1.0, 2.0, 3.0, 4.0], x=np.arange(4.0)[:, None])
    with pytest.raises(DataValidationError):
        mele(es, correlation_fn(), starts=[[0.0, 0.0, 0.0, -1.0, 1.0]])


def test_default_starts_are_admissible(complete_data):
    """Default starts are admissible and lead with the estimating function's own start"""
    es = ExtendedSample.from_complete(complete_data)
    g = correlation_fn()
    starts = default_starts(es, g, seed=4)
    assert len(starts) >= 1
    assert all(g.admissible(s) for s in starts)
    np.testing.assert_array_equal(starts[0], g.default_start(complete_data))


def test_mele_does_not_depend_on_jobs(mar_data):
    """MELE is identical for one and two workers"""
    es = impute(mar_data, KernelSpec(bandwidth=0.4), kappa=5, seed=8)
    one = mele(es, linreg_fn(), seed=1, jobs=1)
    two = mele(es, linreg_fn(), seed=1, jobs=2)
    np.testing.assert_array_equal(one.theta_hat, two.theta_hat)
