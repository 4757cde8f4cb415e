"""Mixed-effects logistic model for the cluster-level propensity score.

Treatments in cluster i are independent given a shared effect
V_i ~ N(0, σ_V²):

    P(Z_ij = 1 | X_ij, V_i) = expit(X_ij'β + V_i)

and the cluster-level propensity score (CPS) integrates V_i out of the
product of unit terms. All integrals use a Gauss-Hermite rule that targets
the current σ_V²; likelihoods are accumulated in log space.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import optimize, special

from .config import MixedSettings
from .errors import (
    ClusterTooLargeError,
    DimensionMismatchError,
    IndexOutOfRangeError,
    InvalidExposureLevelError,
    NonFiniteLikelihoodError,
    NotConvergedError,
    QuadratureMismatchError,
    SeparationDetectedError,
    TooFewClustersError,
)
from .learners import expit, fit_logistic
from .quadrature import DEFAULT_NODES, QuadratureRule, gauss_hermite_rule
from .study_data import Study, TreatmentVector

logger = logging.getLogger(__name__)

MAX_LOG_SIGMA = math.log(1e2)


def add_intercept(X) -> np.ndarray:
    """Prepend a column of ones."""
    X = np.asarray(X, dtype=float)
    return np.hstack([np.ones((X.shape[0], 1)), X])


@dataclass(frozen=True, eq=False)
class MixedDesign:
    """Stacked data of a study: clusters occupy contiguous row blocks."""

    X: np.ndarray
    z: np.ndarray
    offsets: np.ndarray

    @classmethod
    def from_study(cls, study: Study, intercept: bool = False) -> "MixedDesign":
        X, z, offsets = study.stacked()
        return cls(add_intercept(X) if intercept else X, z.astype(float), offsets)

    def with_covariates(self, X) -> "MixedDesign":
        X = np.asarray(X, dtype=float).reshape(len(self.z), -1)
        return MixedDesign(X, self.z, self.offsets)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_clusters(self) -> int:
        return len(self.offsets) - 1

    @property
    def cluster_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_clusters), np.diff(self.offsets))

    def chunk(self, first: int, last: int) -> "MixedDesign":
        """Clusters ``first..last-1`` as their own design."""
        lo, hi = self.offsets[first], self.offsets[last]
        return MixedDesign(self.X[lo:hi], self.z[lo:hi], self.offsets[first:last + 1] - lo)


@dataclass(frozen=True)
class MixedModelFit:
    beta: np.ndarray
    sigma2_v: float
    loglik: float
    iterations: int
    converged: bool
    grad_norm: float
    boundary: bool = False
    intercept: bool = False

    def design_matrix(self, covariates) -> np.ndarray:
        X = np.asarray(covariates, dtype=float)
        X = X.reshape(X.shape[0], -1)
        X = add_intercept(X) if self.intercept else X
        if X.shape[1] != len(self.beta):
            raise DimensionMismatchError(
                f"covariates give {X.shape[1]} design columns, fit has {len(self.beta)}"
            )
        return X

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": "mixed",
            "beta": [float(b) for b in self.beta],
            "sigma2_v": float(self.sigma2_v),
            "loglik": float(self.loglik),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "grad_norm": float(self.grad_norm),
            "boundary": bool(self.boundary),
            "intercept": bool(self.intercept),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "MixedModelFit":
        return cls(
            beta=np.asarray(payload["beta"], dtype=float),
            sigma2_v=float(payload["sigma2_v"]),
            loglik=float(payload["loglik"]),
            iterations=int(payload["iterations"]),
            converged=bool(payload["converged"]),
            grad_norm=float(payload.get("grad_norm", 0.0)),
            boundary=bool(payload.get("boundary", False)),
            intercept=bool(payload.get("intercept", False)),
        )


@dataclass(frozen=True, eq=False)
class CpsQuery:
    covariates: np.ndarray
    treatment: TreatmentVector

    def __post_init__(self):
        covariates = np.asarray(self.covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates.reshape(-1, 1)
        if covariates.shape[0] != len(self.treatment):
            raise DimensionMismatchError(
                f"{covariates.shape[0]} covariate rows for a treatment vector of length {len(self.treatment)}"
            )
        object.__setattr__(self, "covariates", covariates)


def conditional_prob(x, v, beta, f_offset: float = 0.0):
    """P(Z_ij = 1 | X_ij = x, V_i = v) = expit(x'β + f_offset + v)."""
    eta = float(np.dot(np.asarray(x, dtype=float), np.asarray(beta, dtype=float)))
    return expit(eta + f_offset + np.asarray(v, dtype=float))


def _rule_for(sigma2: float, rule: Optional[QuadratureRule], K: int = DEFAULT_NODES) -> QuadratureRule:
    if rule is None:
        return gauss_hermite_rule(K, sigma2)
    if not rule.targets(sigma2):
        raise QuadratureMismatchError(
            f"quadrature rule targets sigma2={rule.sigma2:g}, model has sigma2_v={sigma2:g}"
        )
    return rule


def _node_loglik(eta: np.ndarray, z: np.ndarray, offsets: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """log Π_j P(Z_ij = z_ij | V_i = v_k) for every cluster and node, shape (I, K)."""
    t = eta[:, None] + nodes[None, :]
    unit = z[:, None] * t - np.logaddexp(0.0, t)
    return np.add.reduceat(unit, offsets[:-1], axis=0)


def log_cps_from_eta(eta, z, rule: QuadratureRule) -> float:
    """log CPS of one cluster given its linear predictors (X'β or f)."""
    eta = np.asarray(eta, dtype=float)
    z = np.asarray(z, dtype=float)
    node_ll = _node_loglik(eta, z, np.array([0, len(z)]), rule.nodes)[0]
    return float(special.logsumexp(node_ll + rule.log_weights))


def log_cluster_prob(query: CpsQuery, fit: MixedModelFit, rule: Optional[QuadratureRule] = None) -> float:
    """Log of :func:`cluster_prob`, with no cluster-size cap."""
    rule = _rule_for(fit.sigma2_v, rule)
    eta = fit.design_matrix(query.covariates) @ fit.beta
    return log_cps_from_eta(eta, query.treatment.as_array(), rule)


def cluster_prob(
    query: CpsQuery,
    fit: MixedModelFit,
    rule: Optional[QuadratureRule] = None,
    max_cluster_size: int = MixedSettings.max_cluster_size,
) -> float:
    """CPS P(Z_i = z_i | X_i) under a fitted mixed model.

    Raises:
        DimensionMismatchError: covariates do not match the fit.
        ClusterTooLargeError: the cluster exceeds ``max_cluster_size``; use
            :func:`log_cluster_prob` instead.
    """
    if len(query.treatment) > max_cluster_size:
        raise ClusterTooLargeError(
            f"cluster of size {len(query.treatment)} exceeds {max_cluster_size}; use log_cluster_prob"
        )
    return math.exp(log_cluster_prob(query, fit, rule))


def marginal_unit_prob(eta, rule: QuadratureRule):
    """∫ expit(η + v) φ(v; 0, σ²) dv, vectorized over ``eta``."""
    eta = np.asarray(eta, dtype=float)
    values = expit(eta[..., None] + rule.nodes) @ rule.weights
    return float(values) if values.ndim == 0 else values


def _cluster_terms(design: MixedDesign, beta: np.ndarray, rule: QuadratureRule, with_grad: bool):
    eta = design.X @ beta
    node_ll = _node_loglik(eta, design.z, design.offsets, rule.nodes)
    log_terms = special.logsumexp(node_ll + rule.log_weights[None, :], axis=1)
    if not with_grad:
        return log_terms, None
    # posterior weight of each node within each cluster
    post = np.exp(node_ll + rule.log_weights[None, :] - log_terms[:, None])
    resid = design.z[:, None] - expit(eta[:, None] + rule.nodes[None, :])
    weighted = post[design.cluster_index] * resid
    grad_beta = design.X.T @ weighted.sum(axis=1)
    grad_log_sigma = float(np.sum(weighted * rule.nodes[None, :]))
    return log_terms, np.append(grad_beta, grad_log_sigma)


def _chunks(n_clusters: int, n_jobs: int) -> List[Tuple[int, int]]:
    bounds = np.linspace(0, n_clusters, min(n_jobs, max(n_clusters, 1)) + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _loglik_terms(design: MixedDesign, beta, rule: QuadratureRule, with_grad: bool, n_jobs: int = 1):
    beta = np.asarray(beta, dtype=float)
    if n_jobs <= 1 or design.n_clusters < 2:
        return _cluster_terms(design, beta, rule, with_grad)
    parts = Parallel(n_jobs=n_jobs, backend="threading")(
        delayed(_cluster_terms)(design.chunk(a, b), beta, rule, with_grad)
        for a, b in _chunks(design.n_clusters, n_jobs)
    )
    log_terms = np.concatenate([part[0] for part in parts])
    grad = np.sum([part[1] for part in parts], axis=0) if with_grad else None
    return log_terms, grad


def design_loglik(design: MixedDesign, beta, sigma2_v: float, rule=None, K=DEFAULT_NODES, n_jobs=1) -> float:
    rule = _rule_for(sigma2_v, rule, K)
    log_terms, _ = _loglik_terms(design, beta, rule, False, n_jobs)
    # numpy sums pairwise in a fixed order
    total = float(np.sum(log_terms))
    if not math.isfinite(total):
        raise NonFiniteLikelihoodError("marginal log-likelihood is not finite")
    return total


def marginal_loglik(
    study: Study,
    beta,
    sigma2_v: float,
    rule: Optional[QuadratureRule] = None,
    K: int = DEFAULT_NODES,
    intercept: bool = False,
    n_jobs: int = 1,
) -> float:
    """Σ_i log CPS(observed z_i); clusters enter independently.

    Raises:
        NonFiniteLikelihoodError: a cluster term under- or overflowed.
    """
    return design_loglik(MixedDesign.from_study(study, intercept), beta, sigma2_v, rule, K, n_jobs)


def loglik_and_gradient(
    design: MixedDesign, theta, K: int = DEFAULT_NODES, n_jobs: int = 1
) -> Tuple[float, np.ndarray]:
    """Log-likelihood and its gradient in θ = (β, log σ_V).

    Node weights do not depend on σ_V, and each node scales as v_k = σ_V·x_k,
    so ∂v_k/∂log σ_V = v_k. The gradient is exact for the quadrature objective.
    """
    theta = np.asarray(theta, dtype=float)
    beta, log_sigma = theta[:-1], theta[-1]
    rule = gauss_hermite_rule(K, math.exp(2.0 * log_sigma))
    log_terms, grad = _loglik_terms(design, beta, rule, True, n_jobs)
    return float(np.sum(log_terms)), grad


def _numeric_hessian(design, theta, K, n_jobs, step=1e-5) -> np.ndarray:
    d = len(theta)
    hessian = np.empty((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = step
        _, g_plus = loglik_and_gradient(design, theta + e, K, n_jobs)
        _, g_minus = loglik_and_gradient(design, theta - e, K, n_jobs)
        hessian[:, k] = (g_plus - g_minus) / (2.0 * step)
    return 0.5 * (hessian + hessian.T)


def _newton_polish(design, theta, K, n_jobs, grad_tol, max_steps=50):
    """Newton steps on a finite-difference Hessian until the gradient is below tolerance."""
    loglik, grad = loglik_and_gradient(design, theta, K, n_jobs)
    steps = 0
    while np.max(np.abs(grad)) >= grad_tol and steps < max_steps:
        hessian = _numeric_hessian(design, theta, K, n_jobs)
        try:
            direction = -np.linalg.solve(hessian, grad)
        except np.linalg.LinAlgError:
            break
        if direction @ grad <= 0:
            # Hessian not negative definite here; fall back to steepest ascent
            direction = grad / max(1.0, np.max(np.abs(grad)))
        scale = 1.0
        for _ in range(30):
            candidate = theta + scale * direction
            cand_ll, cand_grad = loglik_and_gradient(design, candidate, K, n_jobs)
            if math.isfinite(cand_ll) and cand_ll >= loglik - 1e-12 * abs(loglik):
                break
            scale *= 0.5
        else:
            break
        theta, loglik, grad = candidate, cand_ll, cand_grad
        steps += 1
    return theta, loglik, grad, steps


def _fit_from_start(design, beta0, sigma0, K, settings: MixedSettings, n_jobs):
    log_lb = 0.5 * math.log(settings.boundary_sigma2)
    theta0 = np.append(beta0, math.log(sigma0))

    def objective(theta):
        ll, grad = loglik_and_gradient(design, theta, K, n_jobs)
        if not math.isfinite(ll):
            raise NonFiniteLikelihoodError("marginal log-likelihood is not finite")
        return -ll, -grad

    result = optimize.minimize(
        objective,
        theta0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(None, None)] * design.p + [(log_lb, MAX_LOG_SIGMA)],
        options={"maxiter": settings.max_iter, "gtol": settings.grad_tol * 0.1, "ftol": 1e-15},
    )
    theta = result.x
    iterations = int(result.nit)
    at_boundary = theta[-1] <= log_lb + 1e-6
    if at_boundary:
        return theta, -float(result.fun), iterations, True
    theta, loglik, grad, steps = _newton_polish(design, theta, K, n_jobs, settings.grad_tol)
    return theta, loglik, iterations + steps, False


def fit_mixed_design(
    design: MixedDesign,
    K: int = DEFAULT_NODES,
    settings: Optional[MixedSettings] = None,
    start_sigmas: Optional[Sequence[float]] = None,
    intercept: bool = False,
    n_jobs: int = 1,
) -> MixedModelFit:
    """Maximum-likelihood fit of (β, σ_V²) on a prepared design.

    See :func:`fit_mixed`. ``start_sigmas`` overrides the settings' starts.
    """
    settings = settings or MixedSettings()
    if design.n_clusters < 2:
        raise TooFewClustersError(f"mixed model needs at least 2 clusters, got {design.n_clusters}")
    if design.z.min() == design.z.max():
        raise SeparationDetectedError("treatment takes a single value; the mixed model MLE does not exist")

    if design.p:
        plain = fit_logistic(design.X, design.z)
        beta0 = plain.beta
    else:
        plain = None
        beta0 = np.zeros(0)

    candidates = []
    for sigma0 in start_sigmas or settings.start_sigmas:
        theta, loglik, iterations, boundary = _fit_from_start(design, beta0, sigma0, K, settings, n_jobs)
        logger.debug("start sigma=%g: loglik=%.10g boundary=%s", sigma0, loglik, boundary)
        candidates.append((loglik, theta, iterations, boundary))
    loglik, theta, iterations, boundary = max(candidates, key=lambda c: c[0])

    if boundary or math.exp(2.0 * theta[-1]) < settings.boundary_sigma2:
        logger.warning("random-effect variance at the boundary; reporting sigma2_v = 0")
        beta = beta0
        rule = gauss_hermite_rule(1, 0.0)
        log_terms, grad = _loglik_terms(design, beta, rule, True, n_jobs)
        grad_norm = float(np.max(np.abs(grad[:-1]))) if design.p else 0.0
        converged = grad_norm < settings.grad_tol or (plain is not None and plain.converged)
        return MixedModelFit(
            beta=np.array(beta, dtype=float),
            sigma2_v=0.0,
            loglik=float(np.sum(log_terms)),
            iterations=iterations,
            converged=bool(converged),
            grad_norm=grad_norm,
            boundary=True,
            intercept=intercept,
        )

    _, grad = loglik_and_gradient(design, theta, K, n_jobs)
    grad_norm = float(np.max(np.abs(grad)))
    fit = MixedModelFit(
        beta=theta[:-1].copy(),
        sigma2_v=math.exp(2.0 * theta[-1]),
        loglik=loglik,
        iterations=iterations,
        converged=grad_norm < settings.grad_tol,
        grad_norm=grad_norm,
        boundary=False,
        intercept=intercept,
    )
    if not fit.converged:
        raise NotConvergedError(
            f"mixed model gradient max-norm {grad_norm:.3g} above {settings.grad_tol:g}", fit=fit
        )
    logger.info("mixed model: sigma2_v=%.6g loglik=%.10g", fit.sigma2_v, fit.loglik)
    return fit


def fit_mixed(
    study: Study,
    K: int = DEFAULT_NODES,
    settings: Optional[MixedSettings] = None,
    intercept: bool = False,
    n_jobs: int = 1,
) -> MixedModelFit:
    """Fit the mixed-effects logistic propensity model by maximum likelihood.

    The marginal likelihood is maximized over (β, log σ_V) by L-BFGS from each
    start σ_V in ``settings.start_sigmas`` with β at the plain-logistic fit,
    then polished by Newton steps until the gradient max-norm is below
    ``settings.grad_tol``. A σ_V driven to the lower search bound is reported
    as ``sigma2_v = 0`` with ``boundary = True``.

    Args:
        study: Validated study with at least 2 clusters.
        K: Gauss-Hermite nodes.
        settings: Optimizer settings.
        intercept: Prepend a constant covariate.
        n_jobs: Threads for the cluster sums.

    Returns:
        MixedModelFit.

    Raises:
        TooFewClustersError, SeparationDetectedError, RankDeficientError,
        NotConvergedError
    """
    return fit_mixed_design(MixedDesign.from_study(study, intercept), K, settings, None, intercept, n_jobs)


def poisson_binomial_distribution(p) -> np.ndarray:
    """Full pmf of a sum of independent Bernoulli(p_j), along the last axis.

    Leading axes are batch dimensions: an input of shape (..., m) yields
    shape (..., m + 1).
    """
    p = np.asarray(p, dtype=float)
    pmf = np.zeros(p.shape[:-1] + (p.shape[-1] + 1,))
    pmf[..., 0] = 1.0
    for j in range(p.shape[-1]):
        q = p[..., j:j + 1]
        shifted = pmf[..., : j + 1] * q
        pmf[..., : j + 1] *= 1.0 - q
        pmf[..., 1: j + 2] += shifted
    return pmf


def poisson_binomial_pmf(p, g: int) -> float:
    """P(Σ_j B_j = g) for independent B_j ~ Bernoulli(p_j).

    Raises:
        InvalidExposureLevelError: ``g`` outside ``0..len(p)``.
    """
    p = np.asarray(p, dtype=float).ravel()
    if isinstance(g, bool) or int(g) != g or not 0 <= g <= len(p):
        raise InvalidExposureLevelError(f"exposure level {g!r} outside 0..{len(p)}")
    return float(poisson_binomial_distribution(p)[int(g)])


def exposure_prob_from_eta(eta, j: int, z: int, g: int, rule: QuadratureRule) -> float:
    """P(Z_ij = z, G_ij = g | X_i) given linear predictors; G is the treated-peer count."""
    eta = np.asarray(eta, dtype=float)
    n = len(eta)
    if isinstance(j, bool) or not 0 <= j < n:
        raise IndexOutOfRangeError(f"unit index {j} outside 0..{n - 1}")
    if z not in (0, 1):
        raise InvalidExposureLevelError(f"own treatment must be 0 or 1, got {z!r}")
    if isinstance(g, bool) or int(g) != g or not 0 <= g <= n - 1:
        raise InvalidExposureLevelError(f"exposure level {g!r} outside 0..{n - 1}")
    probs = expit(eta[:, None] + rule.nodes[None, :])
    own = probs[j] if z == 1 else 1.0 - probs[j]
    peers = np.delete(probs, j, axis=0).T
    peer_pmf = poisson_binomial_distribution(peers)[:, int(g)]
    return float(rule.weights @ (own * peer_pmf))


def exposure_joint_prob(
    covariates, j: int, z: int, g: int, fit: MixedModelFit, rule: Optional[QuadratureRule] = None
) -> float:
    """Joint probability of own treatment ``z`` and ``g`` treated peers.

    Given V_i the peers are independent, so the peer count is Poisson-binomial
    at every quadrature node.

    Raises:
        IndexOutOfRangeError, InvalidExposureLevelError
    """
    rule = _rule_for(fit.sigma2_v, rule)
    eta = fit.design_matrix(covariates) @ fit.beta
    return exposure_prob_from_eta(eta, j, z, g, rule)
