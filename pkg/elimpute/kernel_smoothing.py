"""
Kernel smoothing on the always-observed covariates.

Gaussian-based product kernels of order 2, 4 and 6, the kernel estimator of
the conditional distribution of Y given X (donor weights for imputation),
Nadaraya-Watson conditional moments, kernel propensity scores and
cross-validated bandwidths. Continuous X coordinates are standardized and
smoothed; binary coordinates split the data into strata that are matched
exactly.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Literal, Optional, Sequence, Tuple

import numpy as np
from sklearn.preprocessing import StandardScaler

from .config import get_settings
from .dataset import Dataset
from .errors import DataValidationError, DegenerateWeightsError, NoDonorsError

logger = logging.getLogger(__name__)

SUPPORTED_ORDERS = (2, 4, 6)
CV_GRID_SIZE = 40
CV_GRID_SPAN = (0.05, 5.0)
MIN_CV_ROWS = 10
CHUNK = 256

Target = Literal["cdf", "propensity"]


@dataclass(frozen=True)
class KernelSpec:
    bandwidth: float = 1.0
    order: int = 2
    standardize: bool = True

    def __post_init__(self):
        if self.order not in SUPPORTED_ORDERS:
            raise DataValidationError(f"kernel order must be one of {SUPPORTED_ORDERS}, got {self.order}")
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0:
            raise DataValidationError(f"bandwidth must be positive, got {self.bandwidth}")


def _polynomial(order: int, u: np.ndarray) -> np.ndarray:
    if order == 2:
        return np.ones_like(u)
    u2 = u * u
    if order == 4:
        return (3.0 - u2) / 2.0
    return (15.0 - 10.0 * u2 + u2 * u2) / 8.0


def univariate_kernel(order: int, u: np.ndarray) -> np.ndarray:
    """Gaussian density times the polynomial that cancels moments 1..order-1"""
    u = np.asarray(u, dtype=float)
    return _polynomial(order, u) * np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)


def kernel_weight(kernel: KernelSpec, u: Sequence[float]) -> float:
    """Product kernel W(u) over the coordinates of u (u already divided by h)"""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(np.prod(univariate_kernel(kernel.order, u)))


@dataclass
class SmoothingWeights:
    adjusted: np.ndarray
    raw: np.ndarray
    match: np.ndarray
    pooled: np.ndarray
    degenerate: np.ndarray


@dataclass
class ConditionalLaw:
    """Discrete estimate of the law of Y given X = target over the donor rows"""

    donors: np.ndarray
    donor_y: np.ndarray
    raw_weights: np.ndarray
    adjusted_weights: np.ndarray
    target: np.ndarray
    stratum: Tuple[float, ...]
    kernel: KernelSpec
    pooled: bool = False
    degenerate: bool = False


class KernelSmoother:
    """
    Kernel weights from target points to a fixed set of reference rows.

    reference="complete" smooths over the complete rows (donors of the
    conditional law); reference="all" smooths over every row (propensity).
    """

    def __init__(self, data: Dataset, kernel: KernelSpec, reference: str = "complete"):
        self.data = data
        self.kernel = kernel
        self._continuous = data.continuous_columns
        self._binary = data.binary_columns
        self._scaler = None
        if kernel.standardize and self._continuous:
            self._scaler = StandardScaler().fit(data.x[:, self._continuous])

        if reference == "complete":
            self.reference = data.complete_index
        elif reference == "all":
            self.reference = np.arange(data.n)
        else:
            raise ValueError(f"unknown reference set {reference!r}")
        self._ref_z = self.scale(data.x[self.reference])
        self._ref_keys = data.x[self.reference][:, self._binary]

    def scale(self, x: np.ndarray) -> np.ndarray:
        """Standardized continuous coordinates divided by the bandwidth"""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = x[:, self._continuous]
        if self._scaler is not None:
            z = self._scaler.transform(z)
        return z / self.kernel.bandwidth

    def weights(
        self,
        targets: np.ndarray,
        strata: Optional[np.ndarray] = None,
        fallback: bool = True,
    ) -> SmoothingWeights:
        """
        Readjusted weights from each target point to the reference rows.

        Negative weights (higher-order kernels) are set to zero and the rest
        rescaled to sum to one. With fallback, an empty stratum pools all
        reference rows and an all-zero weight row becomes uniform over its
        stratum; without fallback both raise.
        """
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        if strata is None:
            strata = targets[:, self._binary]
        strata = np.atleast_2d(np.asarray(strata, dtype=float)).reshape(len(targets), len(self._binary))

        parts = [
            self._weights_chunk(targets[s:s + CHUNK], strata[s:s + CHUNK], fallback)
            for s in range(0, len(targets), CHUNK)
        ]
        return SmoothingWeights(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                                  ("adjusted", "raw", "match", "pooled", "degenerate")))

    def _weights_chunk(self, targets, strata, fallback) -> SmoothingWeights:
        order = self.kernel.order
        u = self._ref_z[None, :, :] - self.scale(targets)[:, None, :]
        poly = np.prod(_polynomial(order, u), axis=-1)
        log_gauss = -0.5 * np.sum(u * u, axis=-1)

        match = np.all(self._ref_keys[None, :, :] == strata[:, None, :], axis=-1)
        pooled = ~match.any(axis=1)
        if pooled.any():
            if not fallback:
                raise NoDonorsError(f"no donors in stratum {tuple(strata[np.argmax(pooled)])}")
            logger.warning(f"{int(pooled.sum())} target(s) have an empty stratum; pooling across strata")
            match[pooled] = True

        masked = np.where(match, log_gauss, -np.inf)
        shift = masked.max(axis=1, keepdims=True)
        with np.errstate(under="ignore"):
            stable = np.where(match, poly * np.exp(masked - shift), 0.0)
            raw = np.where(match, poly * np.exp(log_gauss), 0.0) / (2.0 * np.pi) ** (u.shape[-1] / 2.0)

        adjusted = np.clip(stable, 0.0, None)
        totals = adjusted.sum(axis=1)
        degenerate = ~(totals > 0)
        if degenerate.any():
            if not fallback:
                raise DegenerateWeightsError("all kernel weights are zero or negative at the target point")
            logger.warning(f"{int(degenerate.sum())} target(s) with degenerate weights; using uniform donors")
            adjusted[degenerate] = match[degenerate].astype(float)
            totals[degenerate] = adjusted[degenerate].sum(axis=1)
        adjusted = adjusted / totals[:, None]
        return SmoothingWeights(adjusted, raw, match, pooled, degenerate)

    def law(self, target: Sequence[float], stratum: Optional[Sequence[float]] = None,
            fallback: bool = False) -> ConditionalLaw:
        target = np.asarray(target, dtype=float).ravel()
        strata = None if stratum is None else np.asarray(stratum, dtype=float)[None, :]
        w = self.weights(target[None, :], strata, fallback=fallback)
        keep = w.match[0]
        donors = self.reference[keep]
        key = tuple(target[self._binary]) if stratum is None else tuple(float(v) for v in stratum)
        return ConditionalLaw(
            donors=donors,
            donor_y=self.data.y[donors],
            raw_weights=w.raw[0, keep],
            adjusted_weights=w.adjusted[0, keep],
            target=target,
            stratum=key,
            kernel=self.kernel,
            pooled=bool(w.pooled[0]),
            degenerate=bool(w.degenerate[0]),
        )


def conditional_law(
    data: Dataset,
    kernel: KernelSpec,
    target: Sequence[float],
    stratum: Optional[Sequence[float]] = None,
) -> ConditionalLaw:
    """
    Kernel estimate of F(y | X = target) as weights over complete rows.

    Raises NoDonorsError for an empty stratum and DegenerateWeightsError when
    no weight is positive; callers that need a law at every point use
    KernelSmoother.law(..., fallback=True).
    """
    return KernelSmoother(data, kernel).law(target, stratum, fallback=False)


def conditional_cdf(law: ConditionalLaw, y: Sequence[float]) -> float:
    """Sum of donor weights with Y_l <= y in every component"""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    below = np.all(law.donor_y <= y[None, :], axis=1)
    return float(np.sum(law.adjusted_weights[below]))


def _evaluate_on_donors(f: Callable, law: ConditionalLaw) -> np.ndarray:
    x = np.repeat(law.target[None, :], len(law.donors), axis=0)
    values = np.asarray(f(x, law.donor_y), dtype=float)
    return values.reshape(len(law.donors), -1)


def nw_conditional_mean(
    data: Dataset,
    kernel: KernelSpec,
    f: Callable[[np.ndarray, np.ndarray], np.ndarray],
    target: Sequence[float],
) -> np.ndarray:
    """
    Nadaraya-Watson estimate of E{f(X, Y) | X = target}.

    f is called once with the target repeated per donor (m x d_x) and the
    donor Y rows (m x d_y) and returns m values or an m x r matrix.
    """
    law = conditional_law(data, kernel, target)
    return law.adjusted_weights @ _evaluate_on_donors(f, law)


def nw_conditional_moments(
    data: Dataset,
    kernel: KernelSpec,
    f: Callable[[np.ndarray, np.ndarray], np.ndarray],
    target: Sequence[float],
) -> Tuple[np.ndarray, np.ndarray]:
    """Conditional mean m(x) and second moment E(f f^T | X = x) from one law"""
    law = conditional_law(data, kernel, target)
    values = _evaluate_on_donors(f, law)
    weighted = values * law.adjusted_weights[:, None]
    return weighted.sum(axis=0), values.T @ weighted


@dataclass
class PropensityEstimate:
    smoother: KernelSmoother
    floor: float
    values: np.ndarray
    clamp_fraction: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        w = self.smoother.weights(x, fallback=True)
        delta = self.smoother.data.delta[self.smoother.reference].astype(float)
        return np.clip(w.adjusted @ delta, self.floor, 1.0)


def estimate_propensity(data: Dataset, kernel: KernelSpec, floor: Optional[float] = None) -> PropensityEstimate:
    """Nadaraya-Watson regression of delta on X over all rows, clamped to [floor, 1]"""
    if data.n < 2:
        raise DataValidationError("propensity estimation needs at least 2 rows")
    floor = get_settings().propensity_floor if floor is None else floor
    smoother = KernelSmoother(data, kernel, reference="all")
    w = smoother.weights(data.x, fallback=True)
    fitted = w.adjusted @ data.delta.astype(float)
    clamp_fraction = float(np.mean(fitted < floor))
    values = np.clip(fitted, floor, 1.0)
    logger.debug(f"Propensity: mean={values.mean():.4f}, clamped={clamp_fraction:.1%}")
    return PropensityEstimate(smoother=smoother, floor=floor, values=values, clamp_fraction=clamp_fraction)


def _pilot_scale(m: int, dim: int) -> float:
    return (4.0 / (dim + 2.0)) ** (1.0 / (dim + 4.0)) * m ** (-1.0 / (dim + 4.0))


def _loo_weights(diff: np.ndarray, same: np.ndarray, h: float, order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Leave-one-out readjusted weights and the mask of rows that have any"""
    u = diff / h
    poly = np.prod(_polynomial(order, u), axis=-1)
    masked = np.where(same, -0.5 * np.sum(u * u, axis=-1), -np.inf)
    shift = masked.max(axis=1, keepdims=True)
    shift[~np.isfinite(shift)] = 0.0
    with np.errstate(under="ignore"):
        w = np.clip(np.where(same, poly * np.exp(masked - shift), 0.0), 0.0, None)
    totals = w.sum(axis=1)
    valid = totals > 0
    w[valid] /= totals[valid, None]
    return w, valid


def cdf_cv_score(diff: np.ndarray, same: np.ndarray, y: np.ndarray, h: float, order: int = 2) -> float:
    """
    Leave-one-out CV criterion for a conditional distribution estimator.

    The integrated squared error of I(Y_i <= y) against the leave-one-out
    estimate at X_i is approximated on the sample points y = Y_l; for several
    Y components the componentwise criteria are averaged.
    """
    w, valid = _loo_weights(diff, same, h, order)
    if not valid.any():
        return float("inf")
    scores = []
    for c in range(y.shape[1]):
        below = (y[:, c][:, None] <= y[:, c][None, :]).astype(float)
        fitted = w[valid] @ below
        scores.append(np.mean((below[valid] - fitted) ** 2))
    return float(np.mean(scores))


def propensity_cv_score(diff: np.ndarray, same: np.ndarray, delta: np.ndarray, h: float, order: int = 2) -> float:
    """Leave-one-out squared error of the Nadaraya-Watson fit of delta on X"""
    w, valid = _loo_weights(diff, same, h, order)
    if not valid.any():
        return float("inf")
    return float(np.mean((delta[valid] - w[valid] @ delta) ** 2))


def cv_bandwidth(data: Dataset, target: Target = "cdf", order: int = 2, grid: Optional[np.ndarray] = None) -> float:
    """
    Cross-validated bandwidth on standardized coordinates.

    target="cdf" scores the conditional distribution estimator on the
    complete rows; target="propensity" scores the regression of delta on X
    over all rows. The grid is 40 log-spaced multiples in [0.05, 5] of a
    Silverman-type pilot scale; the grid minimizer is returned.
    """
    rows = data.complete_index if target == "cdf" else np.arange(data.n)
    if len(rows) < MIN_CV_ROWS:
        raise DataValidationError(
            f"cross-validation needs at least {MIN_CV_ROWS} rows, got {len(rows)}"
        )

    smoother = KernelSmoother(data, KernelSpec(bandwidth=1.0, order=order), reference="all")
    z = smoother.scale(data.x[rows])
    keys = data.x[rows][:, data.binary_columns]
    diff = z[:, None, :] - z[None, :, :]
    same = np.all(keys[:, None, :] == keys[None, :, :], axis=-1)
    np.fill_diagonal(same, False)

    if grid is None:
        grid = np.geomspace(*CV_GRID_SPAN, CV_GRID_SIZE) * _pilot_scale(len(rows), z.shape[1])
    grid = np.asarray(grid, dtype=float)

    if target == "cdf":
        y = data.y[rows]
        scores = np.array([cdf_cv_score(diff, same, y, h, order) for h in grid])
    else:
        delta = data.delta.astype(float)
        scores = np.array([propensity_cv_score(diff, same, delta, h, order) for h in grid])

    if np.allclose(scores, scores[0], rtol=1e-12, atol=1e-15):
        middle = float(grid[len(grid) // 2])
        logger.warning(f"Flat {target} CV criterion; using grid midpoint h={middle:.4g}")
        return middle
    best = float(grid[int(np.nanargmin(scores))])
    logger.info(f"CV bandwidth ({target}, order {order}): h={best:.4g}")
    return best


def halved_bandwidth(h_cv: float) -> float:
    """Half the cross-validated bandwidth (undersmoothing rule of thumb)"""
    if h_cv <= 0:
        raise DataValidationError("bandwidth must be positive")
    return h_cv / 2.0


def select_bandwidth(data: Dataset, rule: str = "halve", order: int = 2) -> float:
    """
    Imputation bandwidth.

    "halve" halves the second-order CV bandwidth; "higher-order" runs the CV
    with a kernel of the given order (> 2) and keeps the result.
    """
    if rule == "halve":
        return halved_bandwidth(cv_bandwidth(data, "cdf", order=2))
    if rule == "higher-order":
        return cv_bandwidth(data, "cdf", order=max(order, 4))
    raise DataValidationError(f"unknown bandwidth rule {rule!r}")
