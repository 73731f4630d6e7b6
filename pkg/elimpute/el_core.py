"""
Empirical likelihood with imputed estimating functions.

solve_lagrange maximizes the concave dual sum(log*(1 + t'G_i)) by damped
Newton; log* continues log quadratically below 1/n so the dual is defined
everywhere. ELProfile caches t(theta) and l_n(theta) along an outer search
and mele minimizes l_n over theta from several starts.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import minimize

from .errors import DataValidationError, EvaluationError, HullError, NonConvergenceError
from .estimating_functions import EstimatingFunction
from .imputation import ExtendedSample, imputed_estfun, imputed_estfun_jacobian
from .rng import TAG_JITTER, substream

logger = logging.getLogger(__name__)

INNER_TOL = 1e-10
OUTER_TOL = 1e-6
STEP_TOL = 1e-9
DECREMENT_TOL = 1e-20
ROUNDING_DECREMENT = 1e-12
MAX_INNER = 100
MAX_OUTER = 200
N_JITTER = 4


@dataclass
class LagrangeSolution:
    t: np.ndarray
    logelr: float
    feasible: bool
    iterations: int
    q_norm: float


def _log_star(z: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """log(z) for z >= eps, its second-order Taylor continuation below"""
    below = z < eps
    safe = np.where(below, eps, z)
    value = np.where(below, np.log(eps) - 1.5 + 2.0 * z / eps - z * z / (2.0 * eps * eps), np.log(safe))
    d1 = np.where(below, 2.0 / eps - z / (eps * eps), 1.0 / safe)
    d2 = np.where(below, -1.0 / (eps * eps), -1.0 / (safe * safe))
    return value, d1, d2


def _newton(G: np.ndarray, t: np.ndarray, eps: float):
    z = 1.0 + G @ t
    _, d1, d2 = _log_star(z, eps)
    grad = G.T @ d1
    hess = (G * d2[:, None]).T @ G
    try:
        step = np.linalg.solve(-hess, grad)
    except np.linalg.LinAlgError:
        step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
    return z, grad, step, float(grad @ step)


def _stationary(grad: np.ndarray, decrement: float, n: int, tol: float, scale: float) -> bool:
    """Newton decrement at noise level, or a gradient below tolerance"""
    return decrement <= DECREMENT_TOL or (np.linalg.norm(grad) / n <= tol * scale and decrement <= 1e-12)


def solve_lagrange(G: np.ndarray, tol: float = INNER_TOL, max_iter: int = MAX_INNER) -> LagrangeSolution:
    """
    Lagrange multiplier t for the rows G_i of an n x r matrix.

    Feasible means the dual has a stationary point with every 1 + t'G_i >= 1/n,
    i.e. 0 lies inside the convex hull of the rows. Otherwise logelr is +inf.
    """
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    n, r = G.shape
    if n <= r:
        raise DataValidationError(f"empirical likelihood needs n > r, got n={n}, r={r}")
    if not np.isfinite(G).all():
        raise EvaluationError("non-finite estimating function values")

    eps = 1.0 / n
    scale = max(1.0, float(np.mean(np.abs(G))))
    t = np.zeros(r)
    value = 0.0
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        _, grad, step, decrement = _newton(G, t, eps)
        if _stationary(grad, decrement, n, tol, scale):
            converged = True
            break
        if decrement <= ROUNDING_DECREMENT * max(1.0, abs(value)):
            # predicted gain is below the rounding of the summed objective; Armijo cannot decide
            t = t + step
            value = float(_log_star(1.0 + G @ t, eps)[0].sum())
            continue
        s = 1.0
        while s > 1e-12:
            candidate = t + s * step
            candidate_value = float(_log_star(1.0 + G @ candidate, eps)[0].sum())
            if candidate_value >= value + 1e-4 * s * decrement:
                break
            s /= 2.0
        if candidate_value < value or s <= 1e-12:
            break
        t, value = candidate, candidate_value

    z, grad, _, decrement = _newton(G, t, eps)
    q_norm = float(np.linalg.norm(grad) / n)
    converged = converged or _stationary(grad, decrement, n, tol, scale) or (
        decrement <= ROUNDING_DECREMENT * max(1.0, abs(value))
    )
    feasible = bool(converged and z.min() >= eps * (1.0 - 1e-12))
    logelr = float(np.sum(np.log(z))) if feasible else float("inf")
    return LagrangeSolution(t=t, logelr=max(logelr, 0.0), feasible=feasible, iterations=iterations, q_norm=q_norm)


def el_weights(G: np.ndarray, t: np.ndarray) -> np.ndarray:
    """p_i = 1 / (n (1 + t'G_i))"""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    return 1.0 / (G.shape[0] * (1.0 + G @ t))


def dual_hessian(G: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Hessian of the dual at t, negative semidefinite at a feasible solution"""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    z = 1.0 + G @ t
    return -(G / (z * z)[:, None]).T @ G


@dataclass
class ProfilePoint:
    theta: np.ndarray
    logelr: float
    feasible: bool
    admissible: bool
    t: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None


class ELProfile:
    """theta -> (t(theta), l_n(theta), feasibility) over one extended sample"""

    def __init__(self, es: ExtendedSample, g: EstimatingFunction, cache_size: int = 64):
        self.es = es
        self.g = g
        self.cache_size = cache_size
        self._cache: "OrderedDict[bytes, ProfilePoint]" = OrderedDict()
        self.evaluations = 0

    def point(self, theta: Sequence[float]) -> ProfilePoint:
        theta = np.asarray(theta, dtype=float).ravel().copy()
        key = theta.tobytes()
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]

        self.evaluations += 1
        if not self.g.admissible(theta):
            point = ProfilePoint(theta=theta, logelr=float("inf"), feasible=False, admissible=False)
        else:
            G = imputed_estfun(self.es, self.g, theta)
            sol = solve_lagrange(G)
            point = ProfilePoint(theta=theta, logelr=sol.logelr, feasible=sol.feasible, admissible=True, t=sol.t, G=G)

        self._cache[key] = point
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return point

    def logelr(self, theta: Sequence[float]) -> float:
        return self.point(theta).logelr

    def value_and_gradient(self, theta: Sequence[float]) -> Tuple[float, np.ndarray]:
        """l_n(theta) and its gradient n * Q_n2(theta) = sum_i J_i't / (1 + t'G_i)"""
        point = self.point(theta)
        if not point.feasible:
            return float("inf"), np.zeros(self.g.p)
        J = imputed_estfun_jacobian(self.es, self.g, point.theta)
        z = 1.0 + point.G @ point.t
        return point.logelr, np.einsum("irp,r,i->p", J, point.t, 1.0 / z)

    def q2_norm(self, theta: Sequence[float]) -> float:
        value, grad = self.value_and_gradient(theta)
        return float(np.linalg.norm(grad) / self.es.n) if np.isfinite(value) else float("inf")

    def converged(self, theta: Sequence[float]) -> bool:
        return self.q2_norm(theta) <= OUTER_TOL


def el_ratio(es: ExtendedSample, g: EstimatingFunction, theta: Sequence[float]) -> float:
    """l_n(theta) = -log(L_n(theta) / n^-n), +inf outside the hull"""
    return ELProfile(es, g).logelr(theta)


@dataclass
class ELCandidate:
    start: np.ndarray
    theta: np.ndarray
    logelr: float
    feasible: bool
    converged: bool
    q2_norm: float
    iterations: int
    method: str


@dataclass
class ELFit:
    theta_hat: np.ndarray
    t: np.ndarray
    weights: np.ndarray
    logelr: float
    converged: bool
    iterations: int
    q1_norm: float
    q2_norm: float
    param_names: Tuple[str, ...] = ()
    candidates: List[ELCandidate] = field(default_factory=list)


def gauss_newton_polish(profile: ELProfile, theta: np.ndarray, logelr: float, max_iter: int = 20) -> Tuple[np.ndarray, float]:
    """
    Gauss-Newton steps on the averaged moment equations, each accepted only
    if it does not increase l_n (halving up to 10 times).
    """
    es, g = profile.es, profile.g
    for _ in range(max_iter):
        point = profile.point(theta)
        if not point.feasible:
            break
        G = point.G
        D = imputed_estfun_jacobian(es, g, theta).mean(axis=0)
        S = G.T @ G / es.n
        try:
            s_inv_d = np.linalg.solve(S, D)
            step = -np.linalg.solve(D.T @ s_inv_d, s_inv_d.T @ G.mean(axis=0))
        except np.linalg.LinAlgError:
            break

        scale = 1.0
        accepted = None
        for _ in range(10):
            candidate = theta + scale * step
            value = profile.logelr(candidate)
            if value <= logelr:
                accepted = (candidate, value)
                break
            scale /= 2.0
        if accepted is None:
            break
        moved = np.linalg.norm(accepted[0] - theta)
        theta, logelr = accepted
        if moved <= STEP_TOL * (1.0 + np.linalg.norm(theta)):
            break
    return theta, logelr


def _optimize_from(es: ExtendedSample, g: EstimatingFunction, start: np.ndarray) -> ELCandidate:
    profile = ELProfile(es, g)
    n = es.n
    start = np.asarray(start, dtype=float)
    logelr = profile.logelr(start)
    if not np.isfinite(logelr):
        return ELCandidate(start, start, logelr, False, False, float("inf"), 0, "none")

    def objective(theta):
        value, grad = profile.value_and_gradient(theta)
        return value / n, grad / n

    with np.errstate(invalid="ignore", over="ignore"):
        result = minimize(objective, start, jac=True, method="BFGS",
                          options={"gtol": 1e-9, "maxiter": MAX_OUTER})
    theta = result.x if np.all(np.isfinite(result.x)) and np.isfinite(profile.logelr(result.x)) else start
    theta, logelr = gauss_newton_polish(profile, theta, profile.logelr(theta))
    iterations = int(result.nit)
    method = "bfgs"

    if not profile.converged(theta):
        logger.debug(f"BFGS stopped at q2={profile.q2_norm(theta):.3g}; trying Nelder-Mead")
        simplex = minimize(profile.logelr, theta, method="Nelder-Mead",
                           options={"maxiter": MAX_OUTER * g.p, "xatol": 1e-10, "fatol": 1e-14})
        if np.isfinite(simplex.fun) and simplex.fun < logelr:
            theta, logelr = simplex.x, float(simplex.fun)
        theta, logelr = gauss_newton_polish(profile, theta, logelr)
        iterations += int(simplex.nit)
        method = "bfgs+nelder-mead"

    q2 = profile.q2_norm(theta)
    return ELCandidate(
        start=start,
        theta=np.asarray(theta, dtype=float),
        logelr=float(logelr),
        feasible=bool(np.isfinite(logelr)),
        converged=q2 <= OUTER_TOL,
        q2_norm=q2,
        iterations=iterations,
        method=method,
    )


def default_starts(es: ExtendedSample, g: EstimatingFunction, seed: int = 0, n_jitter: int = N_JITTER) -> List[np.ndarray]:
    """The complete-case estimate plus jittered copies that stay admissible"""
    base = np.asarray(g.default_start(es.base), dtype=float)
    rng = substream(seed, TAG_JITTER)
    starts = [base]
    for _ in range(n_jitter):
        candidate = base + 0.05 * (1.0 + np.abs(base)) * rng.standard_normal(g.p)
        if g.admissible(candidate):
            starts.append(candidate)
    return starts


def mele(
    es: ExtendedSample,
    g: EstimatingFunction,
    starts: Optional[Sequence[Sequence[float]]] = None,
    seed: int = 0,
    jobs: int = 1,
) -> ELFit:
    """
    Maximum empirical likelihood estimate.

    Each start runs BFGS on l_n with the implicit gradient, a Gauss-Newton
    polish and, if still not stationary, Nelder-Mead. Among converged
    candidates the one with the smallest l_n wins.
    """
    if starts is None:
        starts = default_starts(es, g, seed)
    starts = [np.asarray(s, dtype=float).ravel() for s in starts]
    if not starts:
        raise DataValidationError("mele needs at least one start")
    admissible = [s for s in starts if s.shape[0] == g.p and g.admissible(s)]
    if not admissible:
        raise DataValidationError("no admissible start value")

    candidates = Parallel(n_jobs=jobs)(delayed(_optimize_from)(es, g, s) for s in admissible)
    diagnostics = {
        "starts": len(candidates),
        "best_logelr": min(c.logelr for c in candidates),
        "q2_norms": [c.q2_norm for c in candidates],
    }
    if not any(c.feasible for c in candidates):
        raise HullError("zero is outside the convex hull of the estimating functions at every start")
    converged = [c for c in candidates if c.converged]
    if not converged:
        best = min(candidates, key=lambda c: c.logelr)
        diagnostics["best_theta"] = best.theta.tolist()
        raise NonConvergenceError(f"no start converged (best q2 norm {best.q2_norm:.3g})", diagnostics)

    best = min(converged, key=lambda c: c.logelr)
    point = ELProfile(es, g).point(best.theta)
    logger.debug(f"MELE {g.name}: theta={best.theta.tolist()}, logelr={best.logelr:.6g}")
    return ELFit(
        theta_hat=best.theta,
        t=point.t,
        weights=el_weights(point.G, point.t),
        logelr=best.logelr,
        converged=True,
        iterations=best.iterations,
        q1_norm=float(np.linalg.norm(point.G.T @ (1.0 / (1.0 + point.G @ point.t))) / es.n),
        q2_norm=best.q2_norm,
        param_names=g.param_names,
        candidates=list(candidates),
    )
