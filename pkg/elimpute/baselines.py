"""
Comparator estimators: full-data EL, complete-case EL, inverse-propensity
weighted GMM with a kernel propensity, and the parametric complete-case
intervals (OLS t-intervals, Fisher z for a correlation).
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm, t as student_t

from .dataset import Dataset
from .el_core import ELFit, mele
from .errors import DataValidationError, DomainError, NonConvergenceError
from .estimating_functions import EstimatingFunction
from .imputation import ExtendedSample
from .inference import kernel_plugins
from .kernel_smoothing import KernelSpec, PropensityEstimate, cv_bandwidth, estimate_propensity
from .schemas import CalibrationResult, Interval

logger = logging.getLogger(__name__)

CLAMP_WARN_FRACTION = 0.20
GMM_TOL = 1e-6


def complete_case_sample(data: Dataset) -> ExtendedSample:
    """The complete rows as a fully observed extended sample"""
    return ExtendedSample.from_complete(data.complete_cases())


def el_complete_case(data: Dataset, g: EstimatingFunction, starts=None, seed: int = 0, jobs: int = 1) -> ELFit:
    """MELE on the complete rows only; biased unless data are missing completely at random"""
    if data.n_complete <= g.r:
        raise DataValidationError(f"complete-case EL needs more than {g.r} complete rows, got {data.n_complete}")
    return mele(complete_case_sample(data), g, starts, seed=seed, jobs=jobs)


def el_full_data(data: Dataset, g: EstimatingFunction, starts=None, seed: int = 0, jobs: int = 1) -> ELFit:
    if data.n_missing:
        raise DataValidationError(f"full-data EL needs every y observed, {data.n_missing} rows are missing")
    return mele(ExtendedSample.from_complete(data), g, starts, seed=seed, jobs=jobs)


@dataclass
class WeightedGmm:
    theta_tilde: np.ndarray
    A: np.ndarray
    n_complete: int
    n: int
    propensity: PropensityEstimate
    objective: float
    covariance: np.ndarray
    param_names: Tuple[str, ...] = ()
    warnings: List[str] = field(default_factory=list)


def _weighting_matrix(A: Optional[np.ndarray], r: int) -> np.ndarray:
    if A is None:
        return np.eye(r)
    A = np.asarray(A, dtype=float)
    if A.shape != (r, r) or not np.allclose(A, A.T):
        raise DataValidationError("weighting matrix must be symmetric r x r")
    if np.linalg.eigvalsh(A).min() < -1e-10:
        raise DataValidationError("weighting matrix must be nonnegative definite")
    return A


def weighted_gmm(
    data: Dataset,
    g: EstimatingFunction,
    kernel: Optional[KernelSpec] = None,
    A: Optional[np.ndarray] = None,
    starts: Optional[Sequence[Sequence[float]]] = None,
    propensity_values: Optional[np.ndarray] = None,
) -> WeightedGmm:
    """
    theta minimizing m(theta)' A m(theta), m = n_c^-1 sum_i delta_i g_i / p(X_i).

    The propensity kernel defaults to the cross-validated propensity
    bandwidth. ``propensity_values`` overrides the kernel fit at the sample
    rows (e.g. all ones for plain complete-case GMM).
    """
    n_c = data.n_complete
    if n_c < g.p:
        raise DataValidationError(f"weighted GMM needs at least {g.p} complete rows, got {n_c}")
    A = _weighting_matrix(A, g.r)
    if kernel is None:
        kernel = KernelSpec(bandwidth=cv_bandwidth(data, "propensity"))
    propensity = estimate_propensity(data, kernel)
    warnings = []
    if propensity.clamp_fraction > CLAMP_WARN_FRACTION:
        message = f"{propensity.clamp_fraction:.0%} of propensities clamped at the floor"
        logger.warning(message)
        warnings.append(message)

    rows = data.complete_index
    x, y = data.x[rows], data.y[rows]
    p_hat = propensity.values if propensity_values is None else np.asarray(propensity_values, dtype=float)
    inverse = 1.0 / p_hat[rows]

    def moments(theta):
        m = (g.evaluate(x, y, theta) * inverse[:, None]).sum(axis=0) / n_c
        M = (g.jacobian(x, y, theta) * inverse[:, None, None]).sum(axis=0) / n_c
        return m, M

    def objective(theta):
        if not g.admissible(theta):
            return float("inf"), np.zeros(g.p)
        m, M = moments(theta)
        return float(m @ A @ m), 2.0 * M.T @ A @ m

    def polish(theta, value):
        for _ in range(20):
            m, M = moments(theta)
            try:
                step = -np.linalg.solve(M.T @ A @ M, M.T @ A @ m)
            except np.linalg.LinAlgError:
                break
            candidate = theta + step
            candidate_value = objective(candidate)[0]
            if not candidate_value <= value:
                break
            theta, value = candidate, candidate_value
            if np.linalg.norm(step) <= 1e-12 * (1.0 + np.linalg.norm(theta)):
                break
        return theta, value

    if starts is None:
        starts = [g.default_start(data)]
    best = None
    for start in starts:
        start = np.asarray(start, dtype=float)
        if not g.admissible(start):
            continue
        with np.errstate(invalid="ignore", over="ignore"):
            result = minimize(objective, start, jac=True, method="BFGS", options={"gtol": 1e-12, "maxiter": 200})
        theta = result.x if np.isfinite(result.fun) else start
        theta, value = polish(theta, objective(theta)[0])
        if np.linalg.norm(objective(theta)[1]) > GMM_TOL:
            simplex = minimize(lambda th: objective(th)[0], theta, method="Nelder-Mead",
                               options={"maxiter": 400 * g.p, "xatol": 1e-10, "fatol": 1e-16})
            if simplex.fun < value:
                theta, value = polish(simplex.x, float(simplex.fun))
        if best is None or value < best[1]:
            best = (np.asarray(theta, dtype=float), value)
    if best is None:
        raise DataValidationError("no admissible start value")
    theta, value = best
    gradient = objective(theta)[1]
    if not np.isfinite(value) or np.linalg.norm(gradient) > GMM_TOL:
        raise NonConvergenceError(
            f"weighted GMM did not converge (gradient norm {np.linalg.norm(gradient):.3g})",
            {"theta": theta.tolist(), "objective": value},
        )

    covariance = _ipw_sandwich(data, g, theta, A, kernel, p_hat)
    logger.debug(f"Weighted GMM {g.name}: theta={theta.tolist()}")
    return WeightedGmm(
        theta_tilde=theta, A=A, n_complete=n_c, n=data.n, propensity=propensity,
        objective=value, covariance=covariance, param_names=g.param_names, warnings=warnings,
    )


def _ipw_sandwich(data: Dataset, g: EstimatingFunction, theta: np.ndarray, A: np.ndarray,
                  kernel: KernelSpec, p_hat: np.ndarray) -> np.ndarray:
    """
    (M'AM)^-1 M'A Gamma A M (M'AM)^-1 with Gamma the second moment of the
    influence terms delta (g - m(X)) / p(X) + m(X), m the kernel E(g|X).
    """
    rows = data.complete_index
    J = g.jacobian(data.x[rows], data.y[rows], theta)
    M = (J / p_hat[rows, None, None]).sum(axis=0) / data.n

    conditional = kernel_plugins(data, g, theta, kernel).mean
    influence = conditional.copy()
    influence[rows] += (g.evaluate(data.x[rows], data.y[rows], theta) - conditional[rows]) / p_hat[rows, None]
    gamma = influence.T @ influence / data.n

    bread = np.linalg.inv(M.T @ A @ M)
    cov = bread @ M.T @ A @ gamma @ A @ M @ bread
    return (cov + cov.T) / 2.0


def wgmm_ci_normal(w: WeightedGmm, alpha: float = 0.05) -> CalibrationResult:
    """Normal intervals theta_j +/- z sqrt(cov_jj / n) from the IPW sandwich"""
    z = float(norm.ppf(1.0 - alpha / 2.0))
    half = z * np.sqrt(np.clip(np.diag(w.covariance), 0.0, None) / w.n)
    names = w.param_names or tuple(f"theta{j}" for j in range(len(w.theta_tilde)))
    intervals = [
        Interval(name=name, lower=float(est - h), upper=float(est + h))
        for name, est, h in zip(names, w.theta_tilde, half)
    ]
    return CalibrationResult(method="normal", alpha=alpha, estimate=w.theta_tilde.tolist(),
                             intervals=intervals, warnings=list(w.warnings))


@dataclass
class OlsFit:
    estimate: np.ndarray
    stderr: np.ndarray
    intervals: List[Interval]
    df: int


def complete_case_ols(
    data: Dataset,
    alpha: float = 0.05,
    response_column: int = 0,
    regressor_column: int = 0,
) -> OlsFit:
    """Least squares of an X column on a Y column over complete rows, with t-intervals"""
    rows = data.complete_index
    if len(rows) < 3:
        raise DataValidationError("complete-case OLS needs at least 3 complete rows")
    design = np.column_stack([np.ones(len(rows)), data.y[rows, regressor_column]])
    response = data.x[rows, response_column]
    estimate, *_ = np.linalg.lstsq(design, response, rcond=None)
    df = len(rows) - 2
    resid = response - design @ estimate
    sigma2 = resid @ resid / df
    stderr = np.sqrt(np.diag(sigma2 * np.linalg.pinv(design.T @ design)))
    quantile = float(student_t.ppf(1.0 - alpha / 2.0, df))
    intervals = [
        Interval(name=name, lower=float(b - quantile * s), upper=float(b + quantile * s))
        for name, b, s in zip(("intercept", "slope"), estimate, stderr)
    ]
    return OlsFit(estimate=estimate, stderr=stderr, intervals=intervals, df=df)


def fisher_z_interval(r: float, n: int, alpha: float = 0.05, name: str = "rho") -> Interval:
    """tanh(atanh(r) -/+ z / sqrt(n - 3))"""
    if n <= 3:
        raise DataValidationError("Fisher z interval needs n > 3")
    if not -1.0 < r < 1.0:
        raise DomainError(f"correlation {r} is not inside (-1, 1)")
    center = np.arctanh(r)
    half = float(norm.ppf(1.0 - alpha / 2.0)) / np.sqrt(n - 3)
    return Interval(name=name, lower=float(np.tanh(center - half)), upper=float(np.tanh(center + half)))
