"""Semiparametric CPS: a nonparametric score f(X_ij) under a Normal random effect.

The model keeps the Normal random effect but replaces X'β with an unknown
f(X_ij):

    P(Z_ij = 1 | X_ij, V_i) = expit(f(X_ij) + V_i)

Marginally, e(x) = ∫ expit(f(x) + v) φ(v; 0, σ_V²) dv. Given cross-fitted
ê, the estimator alternates between inverting that relation for f at the
current σ_V² and refitting σ_V² (with a free loading γ on f) by maximum
likelihood, until σ_V² settles and γ reaches 1.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .config import MixedSettings, SemiparametricSettings
from .crossfit import OutOfFoldScores
from .errors import (
    BracketFailureError,
    MissingFValueError,
    NotConvergedError,
    StudyMismatchError,
)
from .learners import EPSILON, FittedLearner, clamp_probability, expit
from .mixed_model import (
    CpsQuery,
    MixedDesign,
    _rule_for,
    fit_mixed_design,
    log_cps_from_eta,
    marginal_unit_prob,
)
from .quadrature import DEFAULT_NODES, QuadratureRule, gauss_hermite_rule
from .study_data import Study

logger = logging.getLogger(__name__)

F_BRACKET = 40.0


def marginalize_f(f, sigma2_v: float, rule: Optional[QuadratureRule] = None):
    """Forward map h(f) = ∫ expit(f + v) φ(v; 0, σ_V²) dv.

    Strictly increasing in f with range (0, 1) and h(0) = 1/2.
    """
    return marginal_unit_prob(f, _rule_for(sigma2_v, rule))


def marginalize_f_derivative(f, sigma2_v: float, rule: Optional[QuadratureRule] = None):
    """h'(f) = ∫ expit(f + v)(1 - expit(f + v)) φ dv."""
    rule = _rule_for(sigma2_v, rule)
    p = expit(np.asarray(f, dtype=float)[..., None] + rule.nodes)
    values = (p * (1.0 - p)) @ rule.weights
    return float(values) if values.ndim == 0 else values


def invert_integral_equation(
    ehat,
    sigma2_v: float,
    rule: Optional[QuadratureRule] = None,
    tol: float = 1e-10,
    newton_steps: int = 5,
):
    """Solve h(f) = ê for f, vectorized over ``ehat``.

    Bisection on [-40, 40] narrows each bracket below ``tol``; Newton steps
    on the quadrature derivative then polish the root, accepted only while
    they stay inside the bracket and shrink the residual.

    Raises:
        BracketFailureError: some ê lies outside (h(-40), h(40)).
    """
    rule = _rule_for(sigma2_v, rule)
    target = np.asarray(ehat, dtype=float)
    scalar = target.ndim == 0
    target = np.atleast_1d(target)

    lo = np.full(target.shape, -F_BRACKET)
    hi = np.full(target.shape, F_BRACKET)
    h_lo = marginal_unit_prob(lo[:1], rule)[0]
    h_hi = marginal_unit_prob(hi[:1], rule)[0]
    outside = (target <= h_lo) | (target >= h_hi) | ~np.isfinite(target)
    if np.any(outside):
        bad = target[outside][0]
        raise BracketFailureError(
            f"ehat={bad!r} outside the range ({h_lo:.3g}, {h_hi:.3g}) of the forward map"
        )

    # 200 halvings exhaust double precision on [-40, 40]
    for _ in range(200):
        if np.max(hi - lo) <= tol:
            break
        mid = 0.5 * (lo + hi)
        below = marginal_unit_prob(mid, rule) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)

    f = 0.5 * (lo + hi)
    residual = np.abs(marginal_unit_prob(f, rule) - target)
    for _ in range(newton_steps):
        slope = marginalize_f_derivative(f, rule.sigma2, rule)
        candidate = f - (marginal_unit_prob(f, rule) - target) / slope
        cand_residual = np.abs(marginal_unit_prob(candidate, rule) - target)
        accept = (candidate >= lo - tol) & (candidate <= hi + tol) & (cand_residual < residual)
        if not np.any(accept):
            break
        f = np.where(accept, candidate, f)
        residual = np.where(accept, cand_residual, residual)
    return float(f[0]) if scalar else f


def _design(study: Study, f_values) -> MixedDesign:
    design = MixedDesign.from_study(study)
    f = np.asarray(f_values, dtype=float)
    if f.shape != (study.n,):
        raise StudyMismatchError(f"expected {study.n} f values, got {f.shape}")
    return design.with_covariates(f[:, None])


def update_sigma(
    study: Study,
    f_values,
    start_sigma2: float,
    K: int = DEFAULT_NODES,
    settings: Optional[MixedSettings] = None,
    n_jobs: int = 1,
) -> Tuple[float, float]:
    """Refit σ_V² with f as the single covariate: P(Z=1 | f, V) = expit(γ f + V).

    Args:
        study: The study ``f_values`` belongs to.
        f_values: f for every unit, in the study's stacked order.
        start_sigma2: Current σ_V²; used as an extra optimizer start.

    Returns:
        ``(sigma2_v, gamma)``. When f is identically zero the loading is not
        identified; γ is reported as 1 and only σ_V² is fitted.
    """
    settings = settings or MixedSettings()
    design = _design(study, f_values)
    starts = tuple(sorted(set(settings.start_sigmas) | {math.sqrt(max(start_sigma2, 0.0)) or 0.25}))
    if not np.any(design.X):
        null = MixedDesign(np.zeros((study.n, 0)), design.z, design.offsets)
        fit = fit_mixed_design(null, K, settings, starts, n_jobs=n_jobs)
        return fit.sigma2_v, 1.0
    fit = fit_mixed_design(design, K, settings, starts, n_jobs=n_jobs)
    return fit.sigma2_v, float(fit.beta[0])


@dataclass(frozen=True)
class SemiparamFit:
    f_values: Mapping[Tuple[str, int], float]
    sigma2_v: float
    gamma_trace: Tuple[float, ...]
    iterations: int
    converged: bool
    ehat_source: Optional[OutOfFoldScores] = field(default=None, repr=False, compare=False)
    sigma2_trace: Tuple[float, ...] = ()
    loading: float = 1.0
    unit_ids: Mapping[Tuple[str, int], int] = field(default_factory=dict, repr=False)

    def f_for(self, cluster_id: str, size: int) -> np.ndarray:
        try:
            return np.array([self.f_values[(cluster_id, j)] for j in range(size)], dtype=float)
        except KeyError as exc:
            raise MissingFValueError(f"no f value for unit {exc.args[0]}") from exc

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": "semiparametric",
            "sigma2_v": float(self.sigma2_v),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "gamma_trace": [float(g) for g in self.gamma_trace],
            "sigma2_trace": [float(s) for s in self.sigma2_trace],
            "loading": float(self.loading),
            "f": [
                {"cluster_id": cid, "unit_id": self.unit_ids.get((cid, j), j), "f": float(value)}
                for (cid, j), value in self.f_values.items()
            ],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any], study: Study) -> "SemiparamFit":
        """Rebuild a fit, mapping file-level unit ids onto the study's unit indices."""
        index_of = {(c.id, u.label): u.unit_index for c in study.clusters for u in c.units}
        f_values, unit_ids = {}, {}
        for row in payload["f"]:
            key = (str(row["cluster_id"]), int(row["unit_id"]))
            if key not in index_of:
                raise StudyMismatchError(f"f value for unknown unit {key}")
            f_values[(key[0], index_of[key])] = float(row["f"])
            unit_ids[(key[0], index_of[key])] = key[1]
        return cls(
            f_values=f_values,
            sigma2_v=float(payload["sigma2_v"]),
            gamma_trace=tuple(float(g) for g in payload.get("gamma_trace", ())),
            iterations=int(payload["iterations"]),
            converged=bool(payload["converged"]),
            sigma2_trace=tuple(float(s) for s in payload.get("sigma2_trace", ())),
            loading=float(payload.get("loading", 1.0)),
            unit_ids=unit_ids,
        )


def _iterate(study, ehat, init_sigma2, K, settings, mixed_settings, n_jobs):
    sigma2 = init_sigma2
    loading = 1.0
    gammas: List[float] = []
    sigmas: List[float] = []
    f = None
    for iteration in range(1, settings.max_iter + 1):
        rule = gauss_hermite_rule(K, sigma2)
        f = loading * invert_integral_equation(ehat, sigma2, rule, settings.inversion_tol)
        new_sigma2, gamma = update_sigma(study, f, sigma2, K, mixed_settings, n_jobs)
        loading *= gamma
        f = gamma * f
        change = abs(new_sigma2 - sigma2)
        gammas.append(gamma)
        sigmas.append(new_sigma2)
        logger.debug(
            "semiparametric iteration %d: sigma2_v=%.8g gamma=%.8g", iteration, new_sigma2, gamma
        )
        sigma2 = new_sigma2
        if max(change, abs(gamma - 1.0)) < settings.tol:
            return f, sigma2, loading, gammas, sigmas, iteration, True
    return f, sigma2, loading, gammas, sigmas, settings.max_iter, False


def fit_semiparametric(
    study: Study,
    ehat: OutOfFoldScores,
    K: int = DEFAULT_NODES,
    settings: Optional[SemiparametricSettings] = None,
    mixed_settings: Optional[MixedSettings] = None,
    n_jobs: int = 1,
) -> SemiparamFit:
    """Iterate integral-equation inversion and σ_V² updates to a fixed point.

    Each iteration inverts ê at the current σ_V², scales f by the loading
    accumulated so far, refits (σ_V², γ), and absorbs γ into f and the
    loading. Because σ_V² does not depend on the scale of its single
    covariate, γ tends to 1 as σ_V² settles.

    Args:
        study: Validated study.
        ehat: Cross-fitted marginal scores covering the study.
        K: Gauss-Hermite nodes.
        settings: Loop settings (start σ_V², fallback, tolerance, cap).
        mixed_settings: Settings for the σ_V² refits.
        n_jobs: Threads for likelihood sums.

    Returns:
        Converged SemiparamFit.

    Raises:
        NotConvergedError: no convergence from either start; ``.fit`` holds
            the last iterate with its traces.
    """
    settings = settings or SemiparametricSettings()
    scores = clamp_probability(ehat.as_array(study), EPSILON)

    attempt = None
    for init in (settings.init_sigma2, settings.fallback_sigma2):
        try:
            attempt = _iterate(study, scores, init, K, settings, mixed_settings, n_jobs)
        except NotConvergedError as exc:
            logger.warning("semiparametric loop from sigma2_v=%g failed: %s", init, exc)
            continue
        if attempt[-1]:
            break
        logger.warning("semiparametric loop from sigma2_v=%g did not converge; restarting", init)

    if attempt is None:
        raise NotConvergedError("semiparametric loop failed from every start")
    f, sigma2, loading, gammas, sigmas, iterations, converged = attempt
    keys = study.unit_keys()
    fit = SemiparamFit(
        f_values={key: float(v) for key, v in zip(keys, f)},
        sigma2_v=float(sigma2),
        gamma_trace=tuple(gammas),
        iterations=iterations,
        converged=converged,
        ehat_source=ehat,
        sigma2_trace=tuple(sigmas),
        loading=float(loading),
        unit_ids=dict(ehat.unit_ids),
    )
    if not converged:
        raise NotConvergedError(
            f"semiparametric loop did not converge in {settings.max_iter} iterations", fit=fit
        )
    logger.info("semiparametric fit: sigma2_v=%.6g after %d iterations", fit.sigma2_v, iterations)
    return fit


def semiparam_cluster_prob(query: CpsQuery, fit: SemiparamFit, rule: Optional[QuadratureRule] = None) -> float:
    """CPS with per-unit success probability expit(f_ij + v).

    Raises:
        MissingFValueError: a queried unit has no fitted f.
    """
    rule = _rule_for(fit.sigma2_v, rule)
    f = fit.f_for(query.treatment.cluster_id, len(query.treatment))
    return math.exp(log_cps_from_eta(f, query.treatment.as_array(), rule))


def extend_f(fit: SemiparamFit, learner: FittedLearner, covariates, K: int = DEFAULT_NODES) -> np.ndarray:
    """f for covariate points outside the training study.

    The learner's ê is inverted at the converged σ_V² and multiplied by the
    accumulated loading, the same map the fit applied to observed units.
    """
    ehat = clamp_probability(np.asarray(learner.predict(covariates), dtype=float), EPSILON)
    rule = gauss_hermite_rule(K, fit.sigma2_v)
    return fit.loading * invert_integral_equation(ehat, fit.sigma2_v, rule)

