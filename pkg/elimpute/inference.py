"""
Limit-law estimation and confidence sets for the imputed empirical likelihood.

Three calibrations are offered: normal intervals from the sandwich Sigma, the
chi-square mixture Q'Omega Q by Monte Carlo, and the reimputing bootstrap of
the EL ratio. The last two yield a threshold q that ci_elr turns into
profile intervals.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import bisect, minimize
from scipy.stats import chi2, norm

from .errors import ConditioningError, DataValidationError, NumericalError
from .estimating_functions import EstimatingFunction, MeanFunction
from .dataset import Dataset
from .el_core import ELFit, ELProfile, mele
from .imputation import ExtendedSample, impute, imputed_estfun, imputed_estfun_jacobian
from .kernel_smoothing import KernelSmoother, KernelSpec, PropensityEstimate, estimate_propensity
from .rng import TAG_BOOTSTRAP, TAG_CHISQ, TAG_REIMPUTE, derive_seed, substream
from .schemas import CalibrationResult, Interval

logger = logging.getLogger(__name__)

MIN_BOOTSTRAP = 100
MIN_MC_DRAWS = 1000
MC_CHUNK = 100_000
PROFILE_XTOL = 1e-6
MAX_DOUBLINGS = 60
DISCARD_WARN_FRACTION = 0.10
PAIR_BUDGET = 200_000


@dataclass
class AsymptoticEstimates:
    gamma: np.ndarray
    gamma_tilde: np.ndarray
    D: np.ndarray
    V: np.ndarray
    Sigma: np.ndarray
    Omega: np.ndarray
    n: int
    propensity: Optional[PropensityEstimate] = None
    clipped_eigenvalues: int = 0


@dataclass
class KernelPlugins:
    """Row-wise kernel estimates at each X_i: propensity, E(g|X), E(gg'|X)"""

    propensity: np.ndarray
    propensity_estimate: PropensityEstimate
    mean: np.ndarray
    second_moment: np.ndarray

    @property
    def conditional_variance(self) -> np.ndarray:
        return self.second_moment - self.mean[:, :, None] * self.mean[:, None, :]


def _symmetric(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2.0


def sqrtm_psd(a: np.ndarray) -> Tuple[np.ndarray, int]:
    """Symmetric square root by eigendecomposition, negative eigenvalues clipped to 0"""
    values, vectors = np.linalg.eigh(_symmetric(a))
    clipped = int(np.sum(values < 0))
    if clipped:
        logger.warning(f"Clipping {clipped} negative eigenvalue(s) (min {values.min():.3g}) before square root")
    root = (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T
    return _symmetric(root), clipped


def kernel_plugins(
    data: Dataset,
    g: EstimatingFunction,
    theta: np.ndarray,
    kernel: KernelSpec,
    propensity_kernel: Optional[KernelSpec] = None,
) -> KernelPlugins:
    """Nadaraya-Watson conditional moments of g and the propensity at every row"""
    propensity = estimate_propensity(data, propensity_kernel or kernel)
    smoother = KernelSmoother(data, kernel)
    donors = smoother.reference
    n_c = len(donors)

    mean = np.empty((data.n, g.r))
    second = np.empty((data.n, g.r, g.r))
    block = max(1, PAIR_BUDGET // max(n_c, 1))
    for s in range(0, data.n, block):
        rows = np.arange(s, min(s + block, data.n))
        w = smoother.weights(data.x[rows], fallback=True).adjusted
        x = np.repeat(data.x[rows], n_c, axis=0)
        y = np.tile(data.y[donors], (len(rows), 1))
        values = g.evaluate(x, y, theta).reshape(len(rows), n_c, g.r)
        mean[rows] = np.einsum("il,ilr->ir", w, values)
        second[rows] = np.einsum("il,ilr,ils->irs", w, values, values)
    return KernelPlugins(propensity=propensity.values, propensity_estimate=propensity, mean=mean, second_moment=second)


def estimate_asymptotics(
    es: ExtendedSample,
    g: EstimatingFunction,
    theta_hat: np.ndarray,
    kernel: Optional[KernelSpec] = None,
    propensity_kernel: Optional[KernelSpec] = None,
) -> AsymptoticEstimates:
    """
    Plug-in Gamma, Gamma-tilde, D, V, Sigma and Omega at theta_hat.

    Gamma adds the kernel estimate of E{(1/p - p) Var(g|X)} to Gamma-tilde, so
    both coincide exactly when nothing is missing.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    n = es.n
    G = imputed_estfun(es, g, theta_hat)
    gamma_tilde = _symmetric(G.T @ G / n)
    eigen = np.linalg.eigvalsh(gamma_tilde)
    if eigen.min() <= 1e-12 * max(1.0, eigen.max()):
        raise ConditioningError(f"Gamma-tilde is not positive definite (min eigenvalue {eigen.min():.3g})")

    propensity = None
    if es.base.n_missing:
        kernel = kernel or es.kernel
        if kernel is None:
            raise DataValidationError("a kernel is required for the plug-in Gamma")
        plugins = kernel_plugins(es.base, g, theta_hat, kernel, propensity_kernel)
        factor = 1.0 / plugins.propensity - plugins.propensity
        gamma = _symmetric(gamma_tilde + np.einsum("i,irs->rs", factor, plugins.conditional_variance) / n)
        propensity = plugins.propensity_estimate
    else:
        gamma = gamma_tilde.copy()

    D = imputed_estfun_jacobian(es, g, theta_hat).mean(axis=0)
    gt_inv_d = np.linalg.solve(gamma_tilde, D)
    V = _symmetric(np.linalg.inv(D.T @ gt_inv_d))
    Sigma = _symmetric(V @ gt_inv_d.T @ gamma @ gt_inv_d @ V)
    root, clipped = sqrtm_psd(gamma)
    Omega = _symmetric(root @ gt_inv_d @ V @ gt_inv_d.T @ root)
    return AsymptoticEstimates(
        gamma=gamma, gamma_tilde=gamma_tilde, D=D, V=V, Sigma=Sigma, Omega=Omega,
        n=n, propensity=propensity, clipped_eigenvalues=clipped,
    )


def fixed_kappa_gammas(
    es: ExtendedSample,
    g: EstimatingFunction,
    theta_hat: np.ndarray,
    kernel: Optional[KernelSpec] = None,
) -> Dict[str, np.ndarray]:
    """
    Direct kernel plug-ins of Gamma and Gamma-tilde in the kappa -> infinity
    limit and for the sample's fixed kappa, for judging whether kappa is
    large enough.
    """
    kernel = kernel or es.kernel or KernelSpec()
    plugins = kernel_plugins(es.base, g, np.asarray(theta_hat, dtype=float), kernel)
    p = plugins.propensity
    var = plugins.conditional_variance
    outer = np.einsum("ir,is->irs", plugins.mean, plugins.mean)
    extra = (1.0 - p) / es.kappa

    def average(factor):
        return _symmetric(np.mean(factor[:, None, None] * var + outer, axis=0))

    return {
        "gamma_limit": average(1.0 / p),
        "gamma_tilde_limit": average(p),
        "gamma_fixed": average(1.0 / p + extra),
        "gamma_tilde_fixed": average(p + extra),
    }


def _names(fit: ELFit) -> Tuple[str, ...]:
    return fit.param_names or tuple(f"theta{j}" for j in range(len(fit.theta_hat)))


def ci_normal(fit: ELFit, asym: AsymptoticEstimates, alpha: float = 0.05) -> CalibrationResult:
    """theta_j +/- z_{1-alpha/2} sqrt(Sigma_jj / n)"""
    if not 0.0 < alpha <= 1.0:
        raise DataValidationError("alpha must lie in (0, 1]")
    z = float(norm.ppf(1.0 - alpha / 2.0))
    half = z * np.sqrt(np.clip(np.diag(asym.Sigma), 0.0, None) / asym.n)
    intervals = [
        Interval(name=name, lower=float(est - h), upper=float(est + h))
        for name, est, h in zip(_names(fit), fit.theta_hat, half)
    ]
    return CalibrationResult(method="normal", alpha=alpha, estimate=fit.theta_hat.tolist(), intervals=intervals)


def chisq_mix_quantile(omega: np.ndarray, alpha: float = 0.05, M: int = 100_000, seed: int = 0) -> float:
    """Monte Carlo (1 - alpha) quantile of Q'Omega Q with Q ~ N(0, I_r)"""
    if M < MIN_MC_DRAWS:
        raise DataValidationError(f"chi-square mixture needs at least {MIN_MC_DRAWS} draws, got {M}")
    weights = np.clip(np.linalg.eigvalsh(_symmetric(np.atleast_2d(omega))), 0.0, None)
    rng = substream(seed, TAG_CHISQ)
    values = np.empty(M)
    for s in range(0, M, MC_CHUNK):
        size = min(MC_CHUNK, M - s)
        values[s:s + size] = rng.standard_normal((size, len(weights))) ** 2 @ weights
    return float(np.quantile(values, 1.0 - alpha))


class _CoordinateProfile:
    """R_n along coordinate j with the other coordinates re-optimized"""

    def __init__(self, profile: ELProfile, fit: ELFit, j: int):
        self.profile = profile
        self.fit = fit
        self.j = j
        self.others = [k for k in range(len(fit.theta_hat)) if k != j]
        self.warm = fit.theta_hat[self.others].copy()

    def _theta(self, value: float, nuisance: np.ndarray) -> np.ndarray:
        theta = np.empty(len(self.fit.theta_hat))
        theta[self.j] = value
        theta[self.others] = nuisance
        return theta

    def __call__(self, value: float) -> float:
        if not self.others:
            return max(2.0 * (self.profile.logelr([value]) - self.fit.logelr), 0.0)

        n = self.profile.es.n
        best_value, best_nuisance = float("inf"), None
        for start in (self.warm, self.fit.theta_hat[self.others]):
            if not np.isfinite(self.profile.logelr(self._theta(value, start))):
                continue

            def objective(nuisance):
                level, grad = self.profile.value_and_gradient(self._theta(value, nuisance))
                return level / n, grad[self.others] / n

            with np.errstate(invalid="ignore", over="ignore"):
                result = minimize(objective, start, jac=True, method="BFGS", options={"gtol": 1e-9, "maxiter": 200})
            level = self.profile.logelr(self._theta(value, result.x))
            if not np.isfinite(level):
                simplex = minimize(lambda v: self.profile.logelr(self._theta(value, v)), start, method="Nelder-Mead")
                result, level = simplex, float(simplex.fun)
            if level < best_value:
                best_value, best_nuisance = level, result.x
            if np.isfinite(best_value):
                break
        if best_nuisance is None:
            return float("inf")
        self.warm = best_nuisance
        return max(2.0 * (best_value - self.fit.logelr), 0.0)


def _endpoint(curve: _CoordinateProfile, q: float, direction: float, step: float) -> Tuple[float, bool]:
    """Crossing of R = q on one side of theta_hat_j; flag True if the hull came first"""
    center = float(curve.fit.theta_hat[curve.j])
    inside = center
    hit_hull = False
    outside = None
    for _ in range(MAX_DOUBLINGS):
        trial = center + direction * step
        level = curve(trial)
        if not np.isfinite(level):
            hit_hull = True
            outside = trial
            break
        if level >= q:
            outside = trial
            break
        inside = trial
        step *= 2.0
    if outside is None:
        logger.warning(f"Profile for coordinate {curve.j} never reached q={q:.4g}")
        return inside, True

    def excess(value):
        level = curve(value)
        return level - q if np.isfinite(level) else 1e12

    root = bisect(excess, inside, outside, xtol=PROFILE_XTOL) if direction > 0 else \
        bisect(excess, outside, inside, xtol=PROFILE_XTOL)
    if hit_hull:
        level = curve(root)
        hit_hull = not (np.isfinite(level) and abs(level - q) <= 1e-3 * max(1.0, q))
    return float(root), hit_hull


def ci_elr(
    es: ExtendedSample,
    g: EstimatingFunction,
    fit: ELFit,
    q: float,
    coords: Optional[Sequence[int]] = None,
    alpha: float = 0.05,
    method: str = "bootstrap",
) -> CalibrationResult:
    """
    Profile intervals {theta_j : min over the rest of R_n(theta) <= q}.

    Each endpoint is bracketed outward from theta_hat with a step guessed
    from the curvature of l_n, then located by bisection.
    """
    if q < 0:
        raise DataValidationError("threshold q must be nonnegative")
    names = _names(fit)
    coords = range(len(fit.theta_hat)) if coords is None else coords
    profile = ELProfile(es, g)

    G = imputed_estfun(es, g, fit.theta_hat)
    D = imputed_estfun_jacobian(es, g, fit.theta_hat).mean(axis=0)
    try:
        curvature_var = np.diag(np.linalg.inv(D.T @ np.linalg.solve(G.T @ G / es.n, D)))
    except np.linalg.LinAlgError:
        curvature_var = np.ones(len(fit.theta_hat))

    intervals: List[Interval] = []
    for j in coords:
        center = float(fit.theta_hat[j])
        if q == 0:
            intervals.append(Interval(name=names[j], lower=center, upper=center))
            continue
        step = max(np.sqrt(max(q, 1.0) * abs(curvature_var[j]) / es.n), 1e-8 * (1.0 + abs(center)))
        upper, upper_hull = _endpoint(_CoordinateProfile(profile, fit, j), q, 1.0, step)
        lower, lower_hull = _endpoint(_CoordinateProfile(profile, fit, j), q, -1.0, step)
        intervals.append(Interval(
            name=names[j], lower=min(lower, center), upper=max(upper, center),
            lower_at_hull=lower_hull, upper_at_hull=upper_hull,
        ))
    warnings = [f"{i.name}: endpoint at hull boundary" for i in intervals if i.lower_at_hull or i.upper_at_hull]
    return CalibrationResult(
        method=method, alpha=alpha, estimate=fit.theta_hat.tolist(), intervals=intervals,
        threshold=float(q), warnings=warnings,
    )


def region_contains(es: ExtendedSample, g: EstimatingFunction, fit: ELFit, theta: Sequence[float], q: float) -> bool:
    """theta in {theta : R_n(theta) <= q}"""
    level = ELProfile(es, g).logelr(theta)
    return bool(np.isfinite(level) and 2.0 * (level - fit.logelr) <= q)


def _bootstrap_one(es: ExtendedSample, g: EstimatingFunction, theta_hat: np.ndarray, seed: int, b: int, max_redraws: int):
    data = es.base
    rng = substream(seed, TAG_BOOTSTRAP, b)
    redraws = 0
    while True:
        rows = rng.integers(0, data.n, size=data.n)
        if data.delta[rows].any():
            break
        redraws += 1
        if redraws > max_redraws:
            return float("nan"), redraws, "no complete rows"

    sample = data.subset(rows)
    try:
        if sample.n_missing:
            resample = impute(sample, es.kernel, es.kappa, seed=derive_seed(seed, TAG_REIMPUTE, b))
        else:
            resample = ExtendedSample.from_complete(sample)
        fit_b = mele(resample, g, starts=[theta_hat])
        at_hat = ELProfile(resample, g).logelr(theta_hat)
    except NumericalError as e:
        return float("nan"), redraws, type(e).__name__
    return max(2.0 * (at_hat - fit_b.logelr), 0.0), redraws, None


def bootstrap_statistics(
    es: ExtendedSample,
    g: EstimatingFunction,
    fit: ELFit,
    B: int = 400,
    seed: int = 0,
    jobs: int = 1,
) -> Tuple[np.ndarray, Dict[str, float]]:
    """
    B bootstrap replicates R*_b = 2 l*(theta_hat) - 2 l*(theta*_hat).

    Each resample draws n rows with replacement, reimputes its missing rows
    from its own complete rows with the original bandwidth and kappa, and
    refits starting at theta_hat. Failed resamples come back as NaN.
    """
    if B < MIN_BOOTSTRAP:
        raise DataValidationError(f"bootstrap calibration requires B >= {MIN_BOOTSTRAP}")
    if es.base.n_missing and es.kernel is None:
        raise DataValidationError("extended sample has no kernel for reimputation")
    outcomes = Parallel(n_jobs=jobs)(
        delayed(_bootstrap_one)(es, g, fit.theta_hat, seed, b, 10 * B) for b in range(B)
    )
    values = np.array([o[0] for o in outcomes])
    discarded = int(np.isnan(values).sum())
    diagnostics = {
        "B": B,
        "discarded": discarded,
        "redraws": int(sum(o[1] for o in outcomes)),
        "infinite": int(np.isinf(values).sum()),
    }
    if discarded > DISCARD_WARN_FRACTION * B:
        logger.warning(f"{discarded} of {B} bootstrap resamples discarded")
    return values, diagnostics


def bootstrap_quantile(values: np.ndarray, alpha: float) -> float:
    """Inverted-CDF (1 - alpha) quantile of the usable replicates"""
    usable = values[~np.isnan(values)]
    if not len(usable):
        raise NumericalError("every bootstrap resample failed")
    return float(np.quantile(usable, 1.0 - alpha, method="inverted_cdf"))


def bootstrap_calibrate(
    es: ExtendedSample,
    g: EstimatingFunction,
    fit: ELFit,
    B: int = 400,
    alpha: float = 0.05,
    seed: int = 0,
    jobs: int = 1,
    intervals: bool = True,
    coords: Optional[Sequence[int]] = None,
) -> CalibrationResult:
    """Bootstrap threshold q*_alpha and, by default, the profile intervals at it"""
    values, diagnostics = bootstrap_statistics(es, g, fit, B, seed, jobs)
    q = bootstrap_quantile(values, alpha)
    diagnostics["q_star"] = q
    warnings = []
    if diagnostics["discarded"] > DISCARD_WARN_FRACTION * B:
        warnings.append(f"{diagnostics['discarded']} of {B} resamples discarded")

    if intervals:
        result = ci_elr(es, g, fit, q, coords=coords, alpha=alpha, method="bootstrap")
        warnings = warnings + result.warnings
        found = result.intervals
    else:
        found = []
    return CalibrationResult(
        method="bootstrap", alpha=alpha, estimate=fit.theta_hat.tolist(), intervals=found,
        threshold=q, draws=B, diagnostics=diagnostics, warnings=warnings,
    )


def chisq_mix_calibrate(
    es: ExtendedSample,
    g: EstimatingFunction,
    fit: ELFit,
    asym: AsymptoticEstimates,
    alpha: float = 0.05,
    M: int = 100_000,
    seed: int = 0,
    coords: Optional[Sequence[int]] = None,
) -> CalibrationResult:
    """Profile intervals at the Monte Carlo quantile of Q'Omega_hat Q"""
    q = chisq_mix_quantile(asym.Omega, alpha, M, seed)
    result = ci_elr(es, g, fit, q, coords=coords, alpha=alpha, method="chisq-mix")
    result.draws = M
    result.diagnostics = {"M": M, "q_star": q, "trace_omega": float(np.trace(asym.Omega))}
    return result


def mean_limit_ratio(es: ExtendedSample, kernel: Optional[KernelSpec] = None) -> Tuple[float, float]:
    """
    Plug-in V1 = E{s2(X)/p(X)} + Var m(X) and V2 = E{s2(X) p(X)} + Var m(X)
    for theta = EY with scalar Y; R_n(theta_0) tends to (V1/V2) chi2_1.
    """
    if es.base.d_y != 1:
        raise DataValidationError("the mean limit ratio needs a scalar y")
    kernel = kernel or es.kernel or KernelSpec()
    plugins = kernel_plugins(es.base, MeanFunction(1), np.zeros(1), kernel)
    p = plugins.propensity
    m = plugins.mean[:, 0]
    s2 = np.clip(plugins.conditional_variance[:, 0, 0], 0.0, None)
    spread = float(np.var(m))
    return float(np.mean(s2 / p) + spread), float(np.mean(s2 * p) + spread)


def scaled_chisq_threshold(es: ExtendedSample, kernel: Optional[KernelSpec] = None, alpha: float = 0.05) -> float:
    v1, v2 = mean_limit_ratio(es, kernel)
    return v1 / v2 * float(chi2.ppf(1.0 - alpha, 1))
