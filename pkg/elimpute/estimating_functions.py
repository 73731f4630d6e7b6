"""
Estimating functions g(Z, theta) with analytic Jacobians.

Every function is vectorized over rows: ``evaluate(x, y, theta)`` takes an
m x d_x block of covariates and an m x d_y block of responses and returns the
m x r matrix of g values; ``jacobian`` returns the m x r x p stack of
dg/dtheta. Built-ins are looked up by name through the registry.
"""
import logging
from abc import ABC, abstractmethod
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .dataset import Dataset
from .errors import DataValidationError, DomainError

logger = logging.getLogger(__name__)


class EstimatingFunction(ABC):
    """r estimating equations in p parameters, r >= p >= 1"""

    name = "custom"

    def __init__(self, r: int, p: int, param_names: Optional[Sequence[str]] = None):
        if not r >= p >= 1:
            raise DataValidationError(f"estimating function needs r >= p >= 1, got r={r}, p={p}")
        self.r = r
        self.p = p
        self.param_names = tuple(param_names) if param_names else tuple(f"theta{j}" for j in range(p))

    @abstractmethod
    def evaluate(self, x: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def jacobian(self, x: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
        ...

    def admissible(self, theta: np.ndarray) -> bool:
        return bool(np.all(np.isfinite(theta)))

    def check_data(self, data: Dataset) -> None:
        """Raise if the dataset cannot feed this function"""

    @abstractmethod
    def default_start(self, data: Dataset) -> np.ndarray:
        ...

    def _require(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.shape[0] != self.p:
            raise DataValidationError(f"{self.name} expects {self.p} parameters, got {theta.shape[0]}")
        if not self.admissible(theta):
            raise DomainError(f"parameter {theta.tolist()} is outside the domain of {self.name}")
        return theta

    def __call__(self, x, y, theta):
        return self.evaluate(x, y, theta)

    def __repr__(self):
        return f"{type(self).__name__}(r={self.r}, p={self.p})"


def _as_blocks(x, y) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if y.ndim == 1:
        y = y[None, :]
    return x, y


class MeanFunction(EstimatingFunction):
    """g = Y - theta"""

    name = "mean"

    def __init__(self, dim: int = 1):
        super().__init__(dim, dim, [f"mean{j}" for j in range(dim)] if dim > 1 else ["mean"])

    def evaluate(self, x, y, theta):
        theta = self._require(theta)
        _, y = _as_blocks(x, y)
        return y[:, : self.r] - theta[None, :]

    def jacobian(self, x, y, theta):
        self._require(theta)
        _, y = _as_blocks(x, y)
        return np.broadcast_to(-np.eye(self.r), (y.shape[0], self.r, self.p)).copy()

    def check_data(self, data):
        if data.d_y < self.r:
            raise DataValidationError(f"mean of dimension {self.r} needs {self.r} y columns")

    def default_start(self, data):
        return data.y[data.complete_index, : self.r].mean(axis=0)


class CorrelationFunction(EstimatingFunction):
    """
    Five-equation system for the correlation of an observed X column and a
    missing Y column, parameters (theta, mu_x, mu_y, var_x, var_y).
    """

    name = "correlation"

    def __init__(self, x_column: int = 0, y_column: int = 0):
        super().__init__(5, 5, ["rho", "mu_x", "mu_y", "var_x", "var_y"])
        self.x_column = x_column
        self.y_column = y_column

    def admissible(self, theta):
        return bool(np.all(np.isfinite(theta)) and theta[3] > 0 and theta[4] > 0)

    def evaluate(self, x, y, theta):
        rho, mu_x, mu_y, var_x, var_y = self._require(theta)
        x, y = _as_blocks(x, y)
        cx = x[:, self.x_column] - mu_x
        cy = y[:, self.y_column] - mu_y
        return np.column_stack([
            cx,
            cy,
            cx * cx - var_x,
            cy * cy - var_y,
            cx * cy - rho * np.sqrt(var_x * var_y),
        ])

    def jacobian(self, x, y, theta):
        rho, mu_x, mu_y, var_x, var_y = self._require(theta)
        x, y = _as_blocks(x, y)
        cx = x[:, self.x_column] - mu_x
        cy = y[:, self.y_column] - mu_y
        sx, sy = np.sqrt(var_x), np.sqrt(var_y)

        jac = np.zeros((x.shape[0], 5, 5))
        jac[:, 0, 1] = -1.0
        jac[:, 1, 2] = -1.0
        jac[:, 2, 1] = -2.0 * cx
        jac[:, 2, 3] = -1.0
        jac[:, 3, 2] = -2.0 * cy
        jac[:, 3, 4] = -1.0
        jac[:, 4, 0] = -sx * sy
        jac[:, 4, 1] = -cy
        jac[:, 4, 2] = -cx
        jac[:, 4, 3] = -rho * sy / (2.0 * sx)
        jac[:, 4, 4] = -rho * sx / (2.0 * sy)
        return jac

    def default_start(self, data):
        x = data.x[:, self.x_column]
        yc = data.y[data.complete_index, self.y_column]
        xc = data.x[data.complete_index, self.x_column]
        var_x = max(np.var(x), 1e-12)
        var_y = max(np.var(yc), 1e-12)
        if len(yc) > 1 and np.std(xc) > 0 and np.std(yc) > 0:
            rho = float(np.clip(np.corrcoef(xc, yc)[0, 1], -0.99, 0.99))
        else:
            rho = 0.0
        return np.array([rho, x.mean(), yc.mean(), var_x, var_y])


class LinearRegressionFunction(EstimatingFunction):
    """
    Normal equations of the regression of an observed response X on a
    possibly missing regressor Y: g = (1, Y)^T (X - theta_1 - theta_2 Y).
    """

    name = "linreg"

    def __init__(self, response_column: int = 0, regressor_column: int = 0):
        super().__init__(2, 2, ["intercept", "slope"])
        self.response_column = response_column
        self.regressor_column = regressor_column

    def evaluate(self, x, y, theta):
        a, b = self._require(theta)
        x, y = _as_blocks(x, y)
        v = y[:, self.regressor_column]
        resid = x[:, self.response_column] - a - b * v
        return np.column_stack([resid, v * resid])

    def jacobian(self, x, y, theta):
        self._require(theta)
        x, y = _as_blocks(x, y)
        v = y[:, self.regressor_column]
        jac = np.empty((x.shape[0], 2, 2))
        jac[:, 0, 0] = -1.0
        jac[:, 0, 1] = -v
        jac[:, 1, 0] = -v
        jac[:, 1, 1] = -v * v
        return jac

    def default_start(self, data):
        rows = data.complete_index
        v = data.y[rows, self.regressor_column]
        u = data.x[rows, self.response_column]
        if len(rows) > 1 and np.var(v) > 0:
            slope = np.cov(v, u, bias=True)[0, 1] / np.var(v)
        else:
            slope = 0.0
        return np.array([u.mean() - slope * v.mean(), slope])


class LogisticFunction(EstimatingFunction):
    """
    Logistic score equations g = S (R - expit(S^T beta)) with
    S = (1, X[covariates], Y) and a binary response column R of X.
    """

    name = "logistic"

    def __init__(self, covariates: Sequence[int] = (0, 1), response: int = 2, y_column: int = 0):
        p = len(covariates) + 2
        super().__init__(p, p, [f"beta{j}" for j in range(p)])
        self.covariates = tuple(covariates)
        self.response = response
        self.y_column = y_column

    def design(self, x, y) -> np.ndarray:
        x, y = _as_blocks(x, y)
        return np.column_stack([np.ones(x.shape[0]), x[:, list(self.covariates)], y[:, self.y_column]])

    def _response(self, x) -> np.ndarray:
        resp = x[:, self.response]
        if not np.isin(resp, (0.0, 1.0)).all():
            raise DomainError("logistic response column must be binary")
        return resp

    def evaluate(self, x, y, theta):
        beta = self._require(theta)
        x, y = _as_blocks(x, y)
        s = self.design(x, y)
        return s * (self._response(x) - expit(s @ beta))[:, None]

    def jacobian(self, x, y, theta):
        beta = self._require(theta)
        x, y = _as_blocks(x, y)
        s = self.design(x, y)
        pi = expit(s @ beta)
        return -(pi * (1.0 - pi))[:, None, None] * s[:, :, None] * s[:, None, :]

    def check_data(self, data):
        self._response(data.x)

    def default_start(self, data):
        rows = data.complete_index
        s = self.design(data.x[rows], data.y[rows])
        return logistic_irls(s, self._response(data.x[rows]))


def logistic_irls(s: np.ndarray, response: np.ndarray, max_iter: int = 50, tol: float = 1e-10) -> np.ndarray:
    """Newton-Raphson (IRLS) for the logistic MLE, with a small ridge for separation"""
    beta = np.zeros(s.shape[1])
    for _ in range(max_iter):
        pi = expit(s @ beta)
        score = s.T @ (response - pi)
        info = (s * (pi * (1.0 - pi))[:, None]).T @ s + 1e-8 * np.eye(s.shape[1])
        step = np.linalg.solve(info, score)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    return beta


def mean_fn(dim: int = 1) -> MeanFunction:
    return MeanFunction(dim)


def correlation_fn(x_column: int = 0, y_column: int = 0) -> CorrelationFunction:
    return CorrelationFunction(x_column, y_column)


def linreg_fn(response_column: int = 0, regressor_column: int = 0) -> LinearRegressionFunction:
    return LinearRegressionFunction(response_column, regressor_column)


def logistic_fn(covariates: Sequence[int] = (0, 1), response: int = 2, y_column: int = 0) -> LogisticFunction:
    return LogisticFunction(covariates, response, y_column)


# Registry: name -> factory building the function for a given dataset
EstfunFactory = Callable[[Dataset], EstimatingFunction]

_REGISTRY: Dict[str, EstfunFactory] = {
    "mean": lambda data: mean_fn(data.d_y),
    "correlation": lambda data: correlation_fn(),
    "linreg": lambda data: linreg_fn(),
    "logistic": lambda data: logistic_fn(covariates=tuple(range(data.d_x - 1)), response=data.d_x - 1),
}


def register_estfun(name: str, factory: EstfunFactory) -> None:
    """Make a custom estimating function selectable by name"""
    if name in _REGISTRY:
        logger.info(f"Replacing estimating function {name!r}")
    _REGISTRY[name] = factory


def available_estfuns() -> Tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def get_estfun(name: str, data: Dataset) -> EstimatingFunction:
    """Build the named estimating function for a dataset and check it fits"""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise DataValidationError(
            f"unknown estimating function {name!r}; choose from {', '.join(available_estfuns())}"
        ) from None
    g = factory(data)
    g.check_data(data)
    return g


def check_jacobian(g: EstimatingFunction, x: np.ndarray, y: np.ndarray, theta: np.ndarray, step: float = 1e-5) -> float:
    """
    Largest relative discrepancy between the analytic Jacobian and central
    differences of evaluate, the step scaled by max(1, |theta_j|).
    """
    theta = np.asarray(theta, dtype=float)
    analytic = g.jacobian(x, y, theta)
    numeric = np.empty_like(analytic)
    for j in range(g.p):
        h = step * max(1.0, abs(theta[j]))
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        numeric[:, :, j] = (g.evaluate(x, y, up) - g.evaluate(x, y, down)) / (2.0 * h)
    return float(np.max(np.abs(analytic - numeric)) / max(1.0, np.max(np.abs(numeric))))
