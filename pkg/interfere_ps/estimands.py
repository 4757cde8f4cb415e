"""Inverse-probability-weighted estimands under partial interference.

For a Bernoulli(α) allocation policy the population average potential
outcome is estimated cluster by cluster with the Horvitz-Thompson form

    (1/n_i) Σ_j 1{Z_ij = z} · π(Z_i(-j); α) · Y_ij / P(Z_i = z_i | X_i)

where π(s; α) = α^s (1 - α)^(m - s) weighs the realized peer vector. Any
object with a ``prob(covariates, treatment)`` method can supply the
cluster-level propensity score.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .errors import (
    ClusterTooLargeError,
    InvalidConfigError,
    MissingOutcomeError,
    StudyMismatchError,
    ZeroPropensityError,
)
from .learners import LogisticFit
from .mixed_model import CpsQuery, MixedModelFit, log_cluster_prob
from .quadrature import DEFAULT_NODES, gauss_hermite_rule
from .semiparametric import SemiparamFit, semiparam_cluster_prob
from .study_data import Cluster, Study, TreatmentVector, all_treatment_vectors

if TYPE_CHECKING:
    from .simulation import PotentialOutcomeTable

logger = logging.getLogger(__name__)

MAX_ENUMERATION_SIZE = 12


@dataclass(frozen=True)
class AllocationPolicy:
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidConfigError(f"allocation must lie strictly in (0, 1), got {self.alpha}", key="alpha")


def as_policies(policies: Sequence[Union[AllocationPolicy, float]]) -> List[AllocationPolicy]:
    return [p if isinstance(p, AllocationPolicy) else AllocationPolicy(float(p)) for p in policies]


class CpsProvider(Protocol):
    """P(Z_i = z_i | X_i); implementations must allow concurrent reads."""

    def prob(self, covariates, treatment: TreatmentVector) -> float:
        ...


class MixedModelCps:
    """Cluster-level propensity score of a fitted mixed model."""

    def __init__(self, fit: MixedModelFit, K: int = DEFAULT_NODES):
        self.fit = fit
        self.rule = gauss_hermite_rule(K, fit.sigma2_v)

    def prob(self, covariates, treatment: TreatmentVector) -> float:
        return math.exp(log_cluster_prob(CpsQuery(covariates, treatment), self.fit, self.rule))


class SemiparametricCps:
    """Cluster-level propensity score of a semiparametric fit; f is looked up per unit."""

    def __init__(self, fit: SemiparamFit, K: int = DEFAULT_NODES):
        self.fit = fit
        self.K = K
        self.rule = gauss_hermite_rule(K, fit.sigma2_v)

    def prob(self, covariates, treatment: TreatmentVector) -> float:
        return semiparam_cluster_prob(CpsQuery(covariates, treatment), self.fit, self.rule)

    def relabeled(self, cluster_id: str, perm: Sequence[int]) -> "SemiparametricCps":
        """Copy whose f values in ``cluster_id`` move with the units: new position i holds unit perm[i]."""
        f = self.fit.f_for(cluster_id, len(perm))
        f_values = dict(self.fit.f_values)
        for new, old in enumerate(perm):
            f_values[(cluster_id, new)] = float(f[int(old)])
        return SemiparametricCps(replace(self.fit, f_values=f_values), self.K)


class IndependentLogisticCps:
    """Product of independent unit propensities under a plain logistic fit.

    This is the mixed model with σ_V² = 0: units in a cluster are treated
    as unrelated.
    """

    def __init__(self, fit: LogisticFit, intercept: bool = False):
        self.fit = fit
        self.intercept = intercept

    def prob(self, covariates, treatment: TreatmentVector) -> float:
        X = np.asarray(covariates, dtype=float).reshape(len(treatment), -1)
        if self.intercept:
            X = np.hstack([np.ones((X.shape[0], 1)), X])
        eta = X @ self.fit.beta
        z = treatment.as_array()
        return math.exp(float(np.sum(z * eta - np.logaddexp(0.0, eta))))


class TableCps:
    """CPS given explicitly per cluster and treatment vector."""

    # keyed by position only; relabeling cannot be expressed
    positional = True

    def __init__(self, table: Mapping[str, Mapping[Tuple[int, ...], float]]):
        self.table = table

    def prob(self, covariates, treatment: TreatmentVector) -> float:
        try:
            return float(self.table[treatment.cluster_id][tuple(treatment.values)])
        except KeyError as exc:
            raise StudyMismatchError(
                f"no tabulated CPS for cluster {treatment.cluster_id!r}, vector {treatment.values}"
            ) from exc


def policy_weight(z_minus_j, policy: AllocationPolicy) -> float:
    """α^s (1 - α)^(m - s) for a peer vector of length m with s treated."""
    z = np.asarray(z_minus_j, dtype=int).ravel()
    s = int(z.sum())
    return policy.alpha ** s * (1.0 - policy.alpha) ** (len(z) - s)


def _peer_weights(z: np.ndarray, alpha: float) -> np.ndarray:
    # policy weight of every unit's peer vector at once
    n = len(z)
    s = z.sum() - z
    return alpha ** s * (1.0 - alpha) ** (n - 1 - s)


def _contribution(z_obs: np.ndarray, y: np.ndarray, prob: float, z: int, alpha: float) -> float:
    mask = z_obs == z
    if not np.any(mask):
        return 0.0
    return float(np.sum(_peer_weights(z_obs, alpha)[mask] * y[mask]) / (len(z_obs) * prob))


def _observed_prob(cluster: Cluster, cps: CpsProvider) -> float:
    prob = cps.prob(cluster.covariates, cluster.treatment_vector())
    if not prob > 0.0 or not math.isfinite(prob):
        raise ZeroPropensityError(f"cluster {cluster.id!r}: CPS of the observed vector is {prob}")
    return prob


def _require_outcomes(cluster: Cluster) -> None:
    if not cluster.has_outcomes:
        raise MissingOutcomeError(f"cluster {cluster.id!r} has units without an outcome")


def cluster_ipw(cluster: Cluster, z: int, policy: AllocationPolicy, cps: CpsProvider) -> float:
    """Horvitz-Thompson contribution of one cluster to μ(z, α).

    Raises:
        MissingOutcomeError: an outcome is absent.
        ZeroPropensityError: the CPS of the observed vector is not positive.
    """
    _require_outcomes(cluster)
    prob = _observed_prob(cluster, cps)
    return _contribution(cluster.treatments, cluster.outcomes, prob, z, policy.alpha)


MuKey = Tuple[int, float]


@dataclass(frozen=True)
class EstimandReport:
    """Estimated (or exact) policy-averaged outcomes and the effects built on them.

    ``variance`` and the standard errors are empty for exact reports.
    """

    alphas: Tuple[float, ...]
    mu: Dict[MuKey, float]
    direct_effect: Dict[float, float]
    spillover_effect: Dict[Tuple[float, float], float]
    spillover_arm: int = 0
    variance: Dict[MuKey, float] = field(default_factory=dict)
    direct_effect_se: Dict[float, float] = field(default_factory=dict)
    spillover_effect_se: Dict[Tuple[float, float], float] = field(default_factory=dict)
    per_cluster: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    columns: Tuple[MuKey, ...] = ()
    cluster_ids: Tuple[str, ...] = ()

    @classmethod
    def from_mu(
        cls,
        mu: Dict[MuKey, float],
        alphas: Sequence[float],
        spillover_arm: int = 0,
        per_cluster: Optional[np.ndarray] = None,
        columns: Sequence[MuKey] = (),
        cluster_ids: Sequence[str] = (),
    ) -> "EstimandReport":
        """Derive the effects from μ; standard errors come from ``per_cluster`` when given."""
        alphas = tuple(alphas)
        de = {a: mu[(1, a)] - mu[(0, a)] for a in alphas}
        se = {(a, b): mu[(spillover_arm, a)] - mu[(spillover_arm, b)] for a in alphas for b in alphas}
        variance, de_se, se_se = {}, {}, {}
        if per_cluster is not None and per_cluster.shape[0] > 1:
            index = {key: k for k, key in enumerate(columns)}
            n = per_cluster.shape[0]

            def sem(values):
                return float(np.sqrt(np.var(values, ddof=1) / n))

            variance = {key: float(np.var(per_cluster[:, k], ddof=1) / n) for key, k in index.items()}
            de_se = {a: sem(per_cluster[:, index[(1, a)]] - per_cluster[:, index[(0, a)]]) for a in alphas}
            se_se = {
                (a, b): sem(per_cluster[:, index[(spillover_arm, a)]] - per_cluster[:, index[(spillover_arm, b)]])
                for a, b in se
            }
        return cls(
            alphas=alphas,
            mu=mu,
            direct_effect=de,
            spillover_effect=se,
            spillover_arm=spillover_arm,
            variance=variance,
            direct_effect_se=de_se,
            spillover_effect_se=se_se,
            per_cluster=per_cluster,
            columns=tuple(columns),
            cluster_ids=tuple(cluster_ids),
        )

    def std_error(self, z: int, alpha: float) -> Optional[float]:
        variance = self.variance.get((z, alpha))
        return None if variance is None else math.sqrt(variance)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_clusters": len(self.cluster_ids),
            "spillover_arm": self.spillover_arm,
            "mu": [
                {
                    "z": z,
                    "alpha": a,
                    "value": self.mu[(z, a)],
                    "variance": self.variance.get((z, a)),
                    "std_error": self.std_error(z, a),
                }
                for a in self.alphas
                for z in (0, 1)
            ],
            "direct_effect": [
                {"alpha": a, "value": self.direct_effect[a], "std_error": self.direct_effect_se.get(a)}
                for a in self.alphas
            ],
            "spillover_effect": [
                {
                    "alpha": a,
                    "alpha_prime": b,
                    "value": value,
                    "std_error": self.spillover_effect_se.get((a, b)),
                }
                for (a, b), value in self.spillover_effect.items()
            ],
        }

    def to_frame(self) -> pd.DataFrame:
        """Flat table with columns estimand, z, alpha, alpha_prime, value, std_error."""
        rows = []
        for a in self.alphas:
            for z in (0, 1):
                rows.append(("mu", z, a, None, self.mu[(z, a)], self.std_error(z, a)))
        for a in self.alphas:
            rows.append(("direct_effect", None, a, None, self.direct_effect[a], self.direct_effect_se.get(a)))
        for (a, b), value in self.spillover_effect.items():
            rows.append(
                ("spillover_effect", self.spillover_arm, a, b, value, self.spillover_effect_se.get((a, b)))
            )
        return pd.DataFrame(rows, columns=["estimand", "z", "alpha", "alpha_prime", "value", "std_error"])

    def save_csv(self, path: Union[str, Path]) -> None:
        frame = self.to_frame()

        def fmt(value, as_int=False):
            if value is None or (isinstance(value, float) and math.isnan(value)):
                return ""
            return str(int(value)) if as_int else repr(float(value))

        out = pd.DataFrame(
            {
                "estimand": frame["estimand"],
                "z": [fmt(v, as_int=True) for v in frame["z"]],
                "alpha": [fmt(v) for v in frame["alpha"]],
                "alpha_prime": [fmt(v) for v in frame["alpha_prime"]],
                "value": [fmt(v) for v in frame["value"]],
                "std_error": [fmt(v) for v in frame["std_error"]],
            }
        )
        out.to_csv(path, index=False, lineterminator="\n")


def _cluster_row(cluster: Cluster, cps: CpsProvider, columns: Sequence[MuKey]) -> np.ndarray:
    _require_outcomes(cluster)
    prob = _observed_prob(cluster, cps)
    z_obs, y = cluster.treatments, cluster.outcomes
    return np.array([_contribution(z_obs, y, prob, z, a) for z, a in columns])


def estimate(
    study: Study,
    policies: Sequence[Union[AllocationPolicy, float]],
    cps: CpsProvider,
    spillover_arm: int = 0,
    n_jobs: int = 1,
) -> EstimandReport:
    """IPW estimates of μ(z, α), DE(α) and SE(α, α') for every policy.

    Args:
        study: Study with outcomes on every unit.
        policies: Allocation policies (or bare α values).
        cps: Cluster-level propensity score provider.
        spillover_arm: Arm on which spillover effects are contrasted.
        n_jobs: Threads for per-cluster contributions.

    Returns:
        EstimandReport with per-cluster contributions and standard errors.
    """
    policies = as_policies(policies)
    if not policies:
        raise InvalidConfigError("at least one allocation policy is required", key="alpha")
    if study.n_clusters < 1:
        raise StudyMismatchError("study has no clusters")
    if spillover_arm not in (0, 1):
        raise InvalidConfigError(f"spillover arm must be 0 or 1, got {spillover_arm}", key="spillover_arm")
    alphas = tuple(dict.fromkeys(p.alpha for p in policies))
    columns = [(z, a) for a in alphas for z in (0, 1)]

    rows = Parallel(n_jobs=n_jobs, backend="threading")(
        delayed(_cluster_row)(cluster, cps, columns) for cluster in study.clusters
    )
    per_cluster = np.vstack(rows)
    mu = {key: float(np.mean(per_cluster[:, k])) for k, key in enumerate(columns)}
    logger.info("estimated %d policy means over %d clusters", len(mu), study.n_clusters)
    return EstimandReport.from_mu(mu, alphas, spillover_arm, per_cluster, columns, study.cluster_ids)


def _check_size(cluster_id: str, n: int) -> None:
    if n > MAX_ENUMERATION_SIZE:
        raise ClusterTooLargeError(
            f"cluster {cluster_id!r} has {n} units; enumeration is limited to {MAX_ENUMERATION_SIZE}"
        )


def policy_average(outcomes: np.ndarray, z: int, alpha: float) -> float:
    """(1/n) Σ_j Σ_peers π(peers; α) R_j(z, peers) for one cluster's outcome table.

    ``outcomes`` has one row per treatment vector in :func:`all_treatment_vectors` order.
    """
    n = outcomes.shape[1]
    W = all_treatment_vectors(n)
    total = 0.0
    for j in range(n):
        rows = W[:, j] == z
        peers = np.delete(W[rows], j, axis=1)
        s = peers.sum(axis=1)
        weights = alpha ** s * (1.0 - alpha) ** (n - 1 - s)
        total += float(weights @ outcomes[rows, j])
    return total / n


def enumeration_routes(
    potential_outcomes: "PotentialOutcomeTable",
    cps_truth: CpsProvider,
    z: int,
    policy: AllocationPolicy,
) -> Tuple[float, float]:
    """Exact E[cluster_ipw] under the true CPS, by two summation orders.

    Returns:
        ``(via_cps, via_policy)``: the CPS-weighted sum over every treatment
        vector of the estimator evaluated at that vector, and the direct
        policy average of the potential outcomes. Both are averaged over
        clusters.
    """
    via_cps, via_policy = [], []
    for table in potential_outcomes.clusters:
        n = table.size
        _check_size(table.cluster_id, n)
        W = all_treatment_vectors(n)
        expected = 0.0
        for k, w in enumerate(W):
            prob = cps_truth.prob(table.covariates, TreatmentVector(table.cluster_id, tuple(int(v) for v in w)))
            if prob > 0.0:
                expected += prob * _contribution(w, table.outcomes[k], prob, z, policy.alpha)
        via_cps.append(expected)
        via_policy.append(policy_average(table.outcomes, z, policy.alpha))
    return float(np.mean(via_cps)), float(np.mean(via_policy))


def true_mu_enumeration(
    potential_outcomes: "PotentialOutcomeTable",
    cps_truth: CpsProvider,
    z: int,
    policy: AllocationPolicy,
) -> float:
    """Exact expectation of the IPW estimate of μ(z, α) under the true CPS.

    Raises:
        ClusterTooLargeError: a cluster has more than 12 units.
    """
    via_cps, via_policy = enumeration_routes(potential_outcomes, cps_truth, z, policy)
    if abs(via_cps - via_policy) > 1e-9 * max(1.0, abs(via_policy)):
        logger.warning(
            "enumeration routes disagree (%.12g vs %.12g); the CPS may not be normalized",
            via_cps,
            via_policy,
        )
    return via_cps
