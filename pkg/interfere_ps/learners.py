"""Learners for the marginal propensity score e(x) = P(Z = 1 | X = x).

Two implementations share the :class:`PropensityLearner` contract: a plain
logistic regression fitted by IRLS, and a Nadaraya-Watson kernel smoother.
Neither adds an intercept; append a constant column to get one.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Protocol

import numpy as np
from scipy import special

from .errors import (
    NotConvergedError,
    RankDeficientError,
    SeparationDetectedError,
    TooFewObservationsError,
)

logger = logging.getLogger(__name__)

EPSILON = 1e-6


def expit(t):
    """Logistic function 1 / (1 + exp(-t)); saturates without overflow."""
    return special.expit(t)


def logit(p):
    return special.logit(p)


def clamp_probability(p, epsilon: float = EPSILON):
    return np.clip(p, epsilon, 1.0 - epsilon)


def _as_design(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X.reshape(-1, 1) if X.ndim == 1 else X


class FittedLearner(Protocol):
    def predict(self, X) -> np.ndarray:
        ...


class PropensityLearner(Protocol):
    label: str

    def fit(self, X, z) -> FittedLearner:
        ...


def logistic_loglik(X, z, beta) -> float:
    """Bernoulli log-likelihood of a logistic model."""
    eta = _as_design(X) @ np.asarray(beta, dtype=float)
    return float(np.sum(z * eta - np.logaddexp(0.0, eta)))


def logistic_score(X, z, beta) -> np.ndarray:
    """Gradient of :func:`logistic_loglik` with respect to ``beta``."""
    X = _as_design(X)
    return X.T @ (np.asarray(z, dtype=float) - expit(X @ np.asarray(beta, dtype=float)))


@dataclass(frozen=True)
class LogisticFit:
    beta: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    grad_norm: float
    epsilon: float = EPSILON
    loglik_trace: tuple = field(default=(), repr=False, compare=False)

    def predict(self, X) -> np.ndarray:
        return clamp_probability(expit(_as_design(X) @ self.beta), self.epsilon)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": "logistic",
            "beta": [float(b) for b in self.beta],
            "loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "LogisticFit":
        return cls(
            beta=np.asarray(payload["beta"], dtype=float),
            loglik=float(payload["loglik"]),
            iterations=int(payload["iterations"]),
            converged=bool(payload["converged"]),
            grad_norm=float(payload.get("grad_norm", 0.0)),
        )


def fit_logistic(
    X,
    z,
    max_iter: int = 100,
    grad_tol: float = 1e-8,
    beta_bound: float = 1e3,
    max_halvings: int = 40,
) -> LogisticFit:
    """Maximum-likelihood logistic regression by IRLS with step-halving.

    Args:
        X: ``(n, p)`` design matrix.
        z: Binary treatments of length ``n``.
        max_iter: Newton iterations allowed.
        grad_tol: Convergence threshold on the score's max-norm.
        beta_bound: Coefficients beyond this magnitude signal separation.
        max_halvings: Step-halvings tried before giving up on an iteration.

    Returns:
        LogisticFit with the MLE.

    Raises:
        SeparationDetectedError: a single treatment level, diverging
            coefficients, or a perfectly saturated fit.
        RankDeficientError: the design lacks full column rank.
        NotConvergedError: ``max_iter`` reached.
    """
    X = _as_design(X)
    z = np.asarray(z, dtype=float)
    n, p = X.shape
    if n == 0 or z.min() == z.max():
        raise SeparationDetectedError("treatment takes a single value; logistic MLE does not exist")
    if p > 0 and np.linalg.matrix_rank(X) < p:
        raise RankDeficientError(f"design matrix of shape {X.shape} is not full column rank")

    beta = np.zeros(p)
    loglik = logistic_loglik(X, z, beta)
    trace = [loglik]
    for iteration in range(1, max_iter + 1):
        mu = expit(X @ beta)
        score = X.T @ (z - mu)
        grad_norm = float(np.max(np.abs(score))) if p else 0.0
        if grad_norm < grad_tol:
            return LogisticFit(beta, loglik, iteration - 1, True, grad_norm, loglik_trace=tuple(trace))
        w = mu * (1.0 - mu)
        hessian = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(hessian, score)
        except np.linalg.LinAlgError as exc:
            raise SeparationDetectedError("information matrix became singular") from exc

        # near the optimum a full step moves the log-likelihood by less than rounding
        floor = loglik - 1e-12 * max(1.0, abs(loglik))
        scale = 1.0
        for _ in range(max_halvings):
            candidate = beta + scale * step
            cand_loglik = logistic_loglik(X, z, candidate)
            if cand_loglik >= floor:
                break
            near_flat = cand_loglik >= loglik - 1e-9 * max(1.0, abs(loglik))
            if near_flat and np.max(np.abs(logistic_score(X, z, candidate))) < grad_norm:
                break
            scale *= 0.5
        else:
            # no ascent possible at machine precision
            grad_norm = float(np.max(np.abs(score)))
            raise NotConvergedError(
                f"step-halving failed at iteration {iteration} (score max-norm {grad_norm:.3g})",
                fit=LogisticFit(beta, loglik, iteration, False, grad_norm, loglik_trace=tuple(trace)),
            )
        beta, loglik = candidate, cand_loglik
        trace.append(loglik)

        if np.max(np.abs(beta)) > beta_bound:
            raise SeparationDetectedError(f"|beta| exceeded {beta_bound:g} at iteration {iteration}")
        if np.max(np.abs(z - expit(X @ beta))) < 1e-6:
            raise SeparationDetectedError("fitted probabilities saturate at the observed treatments")
        logger.debug("IRLS iteration %d: loglik=%.10g", iteration, loglik)

    score = logistic_score(X, z, beta)
    grad_norm = float(np.max(np.abs(score))) if p else 0.0
    if grad_norm < grad_tol:
        return LogisticFit(beta, loglik, max_iter, True, grad_norm, loglik_trace=tuple(trace))
    raise NotConvergedError(
        f"IRLS did not converge in {max_iter} iterations (score max-norm {grad_norm:.3g})",
        fit=LogisticFit(beta, loglik, max_iter, False, grad_norm, loglik_trace=tuple(trace)),
    )


@dataclass(frozen=True)
class KernelSmoother:
    """Nadaraya-Watson smoother with a Gaussian product kernel."""

    X: np.ndarray
    z: np.ndarray
    bandwidth: np.ndarray
    epsilon: float = EPSILON
    chunk_size: int = 512

    def predict(self, X) -> np.ndarray:
        X = _as_design(X)
        scaled_train = self.X / self.bandwidth
        out = np.empty(X.shape[0])
        for start in range(0, X.shape[0], self.chunk_size):
            block = X[start:start + self.chunk_size] / self.bandwidth
            sq = (
                np.sum(block ** 2, axis=1)[:, None]
                - 2.0 * block @ scaled_train.T
                + np.sum(scaled_train ** 2, axis=1)[None, :]
            )
            log_w = -0.5 * np.maximum(sq, 0.0)
            log_w -= log_w.max(axis=1, keepdims=True)
            w = np.exp(log_w)
            out[start:start + self.chunk_size] = (w @ self.z) / w.sum(axis=1)
        return clamp_probability(out, self.epsilon)


def normal_reference_bandwidth(X) -> np.ndarray:
    """Per-coordinate normal-reference bandwidth for a product Gaussian kernel."""
    X = _as_design(X)
    n, d = X.shape
    sd = X.std(axis=0, ddof=1)
    sd = np.where(sd > 0, sd, 1.0)
    return (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * sd * n ** (-1.0 / (d + 4.0))


def fit_nonparametric(
    X,
    z,
    epsilon: float = EPSILON,
    min_observations: int = 20,
    bandwidth: Optional[np.ndarray] = None,
) -> KernelSmoother:
    """Kernel-smoothed propensity score.

    Raises:
        TooFewObservationsError: fewer than ``min_observations`` rows.
    """
    X = _as_design(X)
    z = np.asarray(z, dtype=float)
    if X.shape[0] < min_observations:
        raise TooFewObservationsError(
            f"kernel learner needs at least {min_observations} observations, got {X.shape[0]}"
        )
    h = normal_reference_bandwidth(X) if bandwidth is None else np.asarray(bandwidth, dtype=float)
    return KernelSmoother(X.copy(), z.copy(), h, epsilon)


class LogisticLearner:
    """IRLS logistic regression as a :class:`PropensityLearner`."""

    label = "logistic"

    def __init__(self, max_iter: int = 100, grad_tol: float = 1e-8, beta_bound: float = 1e3):
        self.max_iter = max_iter
        self.grad_tol = grad_tol
        self.beta_bound = beta_bound

    def fit(self, X, z) -> LogisticFit:
        return fit_logistic(X, z, self.max_iter, self.grad_tol, self.beta_bound)


class KernelLearner:
    """Nadaraya-Watson smoother as a :class:`PropensityLearner`."""

    label = "kernel"

    def __init__(self, epsilon: float = EPSILON, min_observations: int = 20):
        self.epsilon = epsilon
        self.min_observations = min_observations

    def fit(self, X, z) -> KernelSmoother:
        return fit_nonparametric(X, z, self.epsilon, self.min_observations)


LEARNERS = {"logistic": LogisticLearner, "kernel": KernelLearner}


def make_learner(name: str, settings=None) -> PropensityLearner:
    """Build a learner by name, taking options from :class:`~interfere_ps.config.Settings`."""
    if name not in LEARNERS:
        raise ValueError(f"unknown learner {name!r}; choose from {sorted(LEARNERS)}")
    if settings is None:
        return LEARNERS[name]()
    if name == "logistic":
        opts = settings.logistic
        return LogisticLearner(opts.max_iter, opts.grad_tol, opts.beta_bound)
    return KernelLearner(settings.kernel.epsilon, settings.kernel.min_observations)
