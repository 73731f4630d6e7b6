"""
Kernel hot-deck multiple imputation.

Each missing row receives kappa donor rows drawn with replacement from the
estimated conditional law of Y given its X. Donors are stored by index, so
imputed values are exact copies of observed ones and every later evaluation
of the estimating functions reuses the same draws.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from .dataset import Dataset
from .errors import DataValidationError, EvaluationError
from .estimating_functions import EstimatingFunction
from .kernel_smoothing import KernelSmoother, KernelSpec
from .rng import substream

logger = logging.getLogger(__name__)

DEFAULT_KAPPA = 20
ROW_BLOCK = 64


@dataclass(frozen=True, eq=False)
class ExtendedSample:
    """
    A dataset plus kappa donor indices for each missing row.

    ``draws[j]`` holds the donors of row ``base.missing_index[j]``; complete
    rows carry no draws.
    """

    base: Dataset
    kappa: int
    draws: np.ndarray
    kernel: Optional[KernelSpec] = None
    seed: int = 0
    pooled_rows: Tuple[int, ...] = ()
    degenerate_rows: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.kappa < 1:
            raise DataValidationError("kappa must be at least 1")
        draws = np.asarray(self.draws, dtype=np.int64).reshape(-1, self.kappa)
        if draws.shape[0] != self.base.n_missing:
            raise DataValidationError(
                f"expected donors for {self.base.n_missing} missing rows, got {draws.shape[0]}"
            )
        if draws.size and (draws.min() < 0 or draws.max() >= self.base.n or (self.base.delta[draws] != 1).any()):
            raise DataValidationError("donor indices must refer to complete rows")
        draws.setflags(write=False)
        object.__setattr__(self, "draws", draws)

    @classmethod
    def from_complete(cls, data: Dataset) -> "ExtendedSample":
        """Extended sample of a fully observed dataset (no draws)"""
        if data.n_missing:
            raise DataValidationError(f"dataset has {data.n_missing} missing rows")
        return cls(base=data, kappa=1, draws=np.empty((0, 1), dtype=np.int64))

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def missing_index(self) -> np.ndarray:
        return self.base.missing_index

    def donors_of(self, row: int) -> np.ndarray:
        position = np.searchsorted(self.missing_index, row)
        if position >= len(self.missing_index) or self.missing_index[position] != row:
            raise KeyError(row)
        return self.draws[position]

    def imputed_values(self) -> np.ndarray:
        """n_missing x kappa x d_y array of imputed Y values"""
        return self.base.y[self.draws]


def _draw_block(reference: np.ndarray, weights: np.ndarray, rows: np.ndarray, kappa: int, seed: int) -> np.ndarray:
    out = np.empty((len(rows), kappa), dtype=np.int64)
    for j, row in enumerate(rows):
        rng = substream(seed, int(row))
        out[j] = reference[rng.choice(len(reference), size=kappa, replace=True, p=weights[j])]
    return out


def impute(data: Dataset, kernel: KernelSpec, kappa: int = DEFAULT_KAPPA, seed: int = 0, jobs: int = 1) -> ExtendedSample:
    """
    Draw kappa donors per missing row from the kernel conditional law.

    Row i draws from its own substream of ``seed``, so the result does not
    depend on ``jobs``.
    """
    if kappa < 1:
        raise DataValidationError("kappa must be at least 1")
    missing = data.missing_index
    if not len(missing):
        return ExtendedSample(base=data, kappa=kappa, draws=np.empty((0, kappa), dtype=np.int64),
                              kernel=kernel, seed=seed)

    smoother = KernelSmoother(data, kernel)
    w = smoother.weights(data.x[missing], fallback=True)
    blocks = Parallel(n_jobs=jobs)(
        delayed(_draw_block)(smoother.reference, w.adjusted[s:s + ROW_BLOCK], missing[s:s + ROW_BLOCK], kappa, seed)
        for s in range(0, len(missing), ROW_BLOCK)
    )
    es = ExtendedSample(
        base=data,
        kappa=kappa,
        draws=np.concatenate(blocks),
        kernel=kernel,
        seed=seed,
        pooled_rows=tuple(int(i) for i in missing[w.pooled]),
        degenerate_rows=tuple(int(i) for i in missing[w.degenerate]),
    )
    logger.debug(f"Imputed {len(missing)} rows with kappa={kappa}, h={kernel.bandwidth:.4g}")
    return es


def _check_finite(values: np.ndarray, rows: np.ndarray) -> None:
    bad = ~np.isfinite(values.reshape(values.shape[0], -1)).all(axis=1)
    if bad.any():
        raise EvaluationError("estimating function is not finite", row=int(rows[np.argmax(bad)]))


def _averaged(es: ExtendedSample, evaluate, shape: Tuple[int, ...]) -> np.ndarray:
    data = es.base
    out = np.empty((data.n,) + shape)
    complete = data.complete_index
    out[complete] = evaluate(data.x[complete], data.y[complete]).reshape((len(complete),) + shape)
    missing = data.missing_index
    if len(missing):
        x = np.repeat(data.x[missing], es.kappa, axis=0)
        y = data.y[es.draws.ravel()]
        values = evaluate(x, y).reshape((len(missing), es.kappa) + shape)
        out[missing] = values.mean(axis=1)
    _check_finite(out, np.arange(data.n))
    return out


def imputed_estfun(es: ExtendedSample, g: EstimatingFunction, theta: np.ndarray) -> np.ndarray:
    """n x r matrix: g at complete rows, the average over the kappa draws at missing rows"""
    return _averaged(es, lambda x, y: g.evaluate(x, y, theta), (g.r,))


def imputed_estfun_jacobian(es: ExtendedSample, g: EstimatingFunction, theta: np.ndarray) -> np.ndarray:
    """n x r x p stack of the row Jacobians, averaged over draws like imputed_estfun"""
    return _averaged(es, lambda x, y: g.jacobian(x, y, theta), (g.r, g.p))
