"""Simulated clustered studies with known truth.

Treatments follow the random-intercept logistic model with a linear or a
named nonlinear score; outcomes follow a linear model in own treatment, the
proportion of treated peers and the covariates. Small clusters also carry
their full potential-outcome table, so the estimands can be computed
exactly.

Randomness comes from numpy's PCG64. The root ``SeedSequence(seed)`` spawns
one child stream per cluster, so a cluster's draws do not depend on how
many clusters come before it or on the order they are generated in.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ClusterTooLargeError, InvalidConfigError, NoisyTableError, StudyMismatchError
from .estimands import (
    MAX_ENUMERATION_SIZE,
    AllocationPolicy,
    EstimandReport,
    as_policies,
    policy_average,
)
from .learners import expit
from .mixed_model import log_cps_from_eta
from .quadrature import DEFAULT_NODES, gauss_hermite_rule
from .study_data import Cluster, Study, TreatmentVector, Unit, all_treatment_vectors, save_study, validate_study

logger = logging.getLogger(__name__)


def _sin2x(x: np.ndarray) -> np.ndarray:
    return np.sin(2.0 * x)


def _sin2x_half_x(x: np.ndarray) -> np.ndarray:
    return np.sin(2.0 * x) + 0.5 * x


# nonlinear scores act on the first covariate
NONLINEAR_TRUTHS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sin2x": _sin2x,
    "sin2x_half_x": _sin2x_half_x,
}


def _require(payload: Dict[str, Any], key: str, prefix: str = "") -> Any:
    if key not in payload:
        raise InvalidConfigError("missing required key", key=prefix + key)
    return payload[key]


def _reject_unknown(payload: Dict[str, Any], known: Sequence[str], prefix: str = "") -> None:
    for key in payload:
        if key not in known:
            raise InvalidConfigError("unknown key", key=prefix + key)


def _number(value: Any, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise InvalidConfigError("expected a finite number", key=key)
    return float(value)


def _integer(value: Any, key: str, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidConfigError("expected an integer", key=key)
    if value < minimum:
        raise InvalidConfigError(f"must be at least {minimum}", key=key)
    return value


def _vector(value: Any, key: str, length: int) -> Tuple[float, ...]:
    if not isinstance(value, list):
        raise InvalidConfigError("expected a list of numbers", key=key)
    if len(value) != length:
        raise InvalidConfigError(f"expected {length} values, got {len(value)}", key=key)
    return tuple(_number(v, key) for v in value)


@dataclass(frozen=True)
class SizeLaw:
    """Cluster sizes: fixed at ``low``, or uniform on ``low..high``."""

    low: int
    high: int

    @property
    def fixed(self) -> bool:
        return self.low == self.high

    def draw(self, rng: np.random.Generator) -> int:
        return self.low if self.fixed else int(rng.integers(self.low, self.high + 1))

    def to_dict(self) -> Dict[str, Any]:
        return {"fixed": self.low} if self.fixed else {"uniform": [self.low, self.high]}

    @classmethod
    def from_dict(cls, payload: Any, key: str = "cluster_size") -> "SizeLaw":
        if not isinstance(payload, dict) or len(payload) != 1:
            raise InvalidConfigError("expected {fixed: n} or {uniform: [low, high]}", key=key)
        kind, value = next(iter(payload.items()))
        if kind == "fixed":
            n = _integer(value, f"{key}.fixed", 1)
            return cls(n, n)
        if kind == "uniform":
            if not isinstance(value, list) or len(value) != 2:
                raise InvalidConfigError("expected [low, high]", key=f"{key}.uniform")
            low = _integer(value[0], f"{key}.uniform", 1)
            high = _integer(value[1], f"{key}.uniform", low)
            return cls(low, high)
        raise InvalidConfigError("unknown size law", key=f"{key}.{kind}")


@dataclass(frozen=True)
class PropensityTruth:
    kind: str
    beta: Tuple[float, ...] = ()
    function: Optional[str] = None

    def eta(self, X: np.ndarray) -> np.ndarray:
        """Score X'β (linear) or f*(x_1) (nonlinear) for each row of ``X``."""
        X = np.asarray(X, dtype=float)
        if self.kind == "linear":
            return X @ np.asarray(self.beta, dtype=float)
        return NONLINEAR_TRUTHS[self.function](X[:, 0])

    def to_dict(self) -> Dict[str, Any]:
        if self.kind == "linear":
            return {"kind": "linear", "beta": list(self.beta)}
        return {"kind": "nonlinear", "function": self.function}

    @classmethod
    def from_dict(cls, payload: Any, p: int, key: str = "propensity") -> "PropensityTruth":
        if not isinstance(payload, dict):
            raise InvalidConfigError("expected a mapping", key=key)
        kind = _require(payload, "kind", f"{key}.")
        if kind == "linear":
            _reject_unknown(payload, ("kind", "beta"), f"{key}.")
            return cls("linear", _vector(_require(payload, "beta", f"{key}."), f"{key}.beta", p))
        if kind == "nonlinear":
            _reject_unknown(payload, ("kind", "function"), f"{key}.")
            name = _require(payload, "function", f"{key}.")
            if name not in NONLINEAR_TRUTHS:
                raise InvalidConfigError(
                    f"unknown function {name!r}; choose from {sorted(NONLINEAR_TRUTHS)}", key=f"{key}.function"
                )
            if p < 1:
                raise InvalidConfigError("nonlinear truth needs at least one covariate", key="p")
            return cls("nonlinear", function=name)
        raise InvalidConfigError(f"unknown kind {kind!r}", key=f"{key}.kind")


@dataclass(frozen=True)
class OutcomeModel:
    """Y_ij = intercept + τ·z_ij + δ·(treated peers / max(n_i - 1, 1)) + X_ij'λ + noise."""

    intercept: float = 0.0
    tau: float = 0.0
    delta: float = 0.0
    loadings: Tuple[float, ...] = ()
    noise_sd: float = 0.0

    def mean(self, X: np.ndarray, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        n = len(w)
        peer_share = (w.sum() - w) / max(n - 1, 1)
        value = self.intercept + self.tau * w + self.delta * peer_share
        if self.loadings:
            value = value + np.asarray(X, dtype=float) @ np.asarray(self.loadings, dtype=float)
        return value

    @classmethod
    def from_dict(cls, payload: Any, p: int, key: str = "outcome") -> "OutcomeModel":
        if not isinstance(payload, dict):
            raise InvalidConfigError("expected a mapping", key=key)
        names = ("intercept", "tau", "delta", "loadings", "noise_sd")
        _reject_unknown(payload, names, f"{key}.")
        values = {k: _number(payload[k], f"{key}.{k}") for k in names if k in payload and k != "loadings"}
        if values.get("noise_sd", 0.0) < 0:
            raise InvalidConfigError("must be non-negative", key=f"{key}.noise_sd")
        loadings = _vector(payload["loadings"], f"{key}.loadings", p) if "loadings" in payload else ()
        return cls(loadings=loadings, **values)


@dataclass(frozen=True)
class DgpConfig:
    n_clusters: int
    cluster_size: SizeLaw
    p: int
    propensity: PropensityTruth
    sigma2_v: float
    outcome: OutcomeModel = field(default_factory=OutcomeModel)
    seed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_clusters": self.n_clusters,
            "cluster_size": self.cluster_size.to_dict(),
            "p": self.p,
            "propensity": self.propensity.to_dict(),
            "sigma2_v": self.sigma2_v,
            "outcome": {**asdict(self.outcome), "loadings": list(self.outcome.loadings)},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: Any) -> "DgpConfig":
        """Validate a parsed JSON config.

        Raises:
            InvalidConfigError: naming the first missing, unknown or invalid key.
        """
        if not isinstance(payload, dict):
            raise InvalidConfigError("simulation config must be a JSON object")
        _reject_unknown(payload, ("n_clusters", "cluster_size", "p", "propensity", "sigma2_v", "outcome", "seed"))
        n_clusters = _integer(_require(payload, "n_clusters"), "n_clusters", 1)
        p = _integer(_require(payload, "p"), "p", 0)
        sigma2_v = _number(_require(payload, "sigma2_v"), "sigma2_v")
        if sigma2_v < 0:
            raise InvalidConfigError("must be non-negative", key="sigma2_v")
        seed = _integer(payload.get("seed", 0), "seed", 0)
        return cls(
            n_clusters=n_clusters,
            cluster_size=SizeLaw.from_dict(_require(payload, "cluster_size")),
            p=p,
            propensity=PropensityTruth.from_dict(_require(payload, "propensity"), p),
            sigma2_v=sigma2_v,
            outcome=OutcomeModel.from_dict(payload.get("outcome", {}), p),
            seed=seed,
        )


def load_dgp_config(path: Union[str, Path]) -> DgpConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise InvalidConfigError(f"cannot read simulation config: {exc}") from exc
    return DgpConfig.from_dict(payload)


def _vector_index(w) -> int:
    # row of ``w`` in all_treatment_vectors: first unit is the most significant bit
    index = 0
    for value in w:
        index = (index << 1) | int(value)
    return index


@dataclass(frozen=True, eq=False)
class ClusterOutcomeTable:
    cluster_id: str
    covariates: np.ndarray
    outcomes: np.ndarray

    @property
    def size(self) -> int:
        return self.outcomes.shape[1]

    def response(self, w) -> np.ndarray:
        """(R_i1(w), ..., R_in(w)) for the full treatment vector ``w``."""
        return self.outcomes[_vector_index(w)]


@dataclass(frozen=True)
class PotentialOutcomeTable:
    clusters: Tuple[ClusterOutcomeTable, ...]
    noiseless: bool = True

    @classmethod
    def from_function(
        cls,
        study: Study,
        response: Callable[[np.ndarray, np.ndarray], np.ndarray],
        noiseless: bool = True,
    ) -> "PotentialOutcomeTable":
        """Tabulate ``response(covariates, w)`` over every treatment vector of every cluster.

        Raises:
            ClusterTooLargeError: a cluster has more than 12 units.
        """
        tables = []
        for cluster in study.clusters:
            if cluster.size > MAX_ENUMERATION_SIZE:
                raise ClusterTooLargeError(
                    f"cluster {cluster.id!r} has {cluster.size} units; tables are limited to {MAX_ENUMERATION_SIZE}"
                )
            X = cluster.covariates
            W = all_treatment_vectors(cluster.size)
            outcomes = np.vstack([np.asarray(response(X, w), dtype=float) for w in W])
            tables.append(ClusterOutcomeTable(cluster.id, X, outcomes))
        return cls(tuple(tables), noiseless)

    def cluster(self, cluster_id: str) -> ClusterOutcomeTable:
        for table in self.clusters:
            if table.cluster_id == cluster_id:
                return table
        raise KeyError(cluster_id)


@dataclass(frozen=True)
class SimulatedStudy:
    study: Study
    random_effects: Dict[str, float]
    truth: DgpConfig
    potential_outcomes: Optional[PotentialOutcomeTable] = None


class TrueCps:
    """Cluster-level propensity score under the generating model."""

    def __init__(self, truth: DgpConfig, K: int = DEFAULT_NODES):
        self.truth = truth
        self.rule = gauss_hermite_rule(K, truth.sigma2_v)

    def prob(self, covariates, treatment: TreatmentVector) -> float:
        X = np.asarray(covariates, dtype=float).reshape(len(treatment), self.truth.p)
        eta = self.truth.propensity.eta(X)
        return math.exp(log_cps_from_eta(eta, treatment.as_array(), self.rule))


def _generate_cluster(config: DgpConfig, cluster_id: str, stream: np.random.SeedSequence):
    rng = np.random.Generator(np.random.PCG64(stream))
    n = config.cluster_size.draw(rng)
    X = rng.standard_normal((n, config.p))
    v = math.sqrt(config.sigma2_v) * rng.standard_normal()
    z = (rng.random(n) < expit(config.propensity.eta(X) + v)).astype(int)
    noise = config.outcome.noise_sd * rng.standard_normal(n)
    y = config.outcome.mean(X, z) + noise
    units = tuple(
        Unit(
            cluster_id=cluster_id,
            unit_index=j,
            treatment=int(z[j]),
            covariates=tuple(float(x) for x in X[j]),
            outcome=float(y[j]),
            unit_id=j,
        )
        for j in range(n)
    )
    return Cluster(cluster_id, units), float(v), noise


def generate(config: DgpConfig, table_noise: bool = False) -> SimulatedStudy:
    """Draw a study from ``config``; identical configs give identical studies.

    Args:
        config: Generating model and seed.
        table_noise: Carry each unit's realized noise into its potential
            outcomes. The table then matches the observed outcomes but is
            flagged as noisy.

    Returns:
        SimulatedStudy; the potential-outcome table is attached when every
        cluster has at most 12 units.
    """
    streams = np.random.SeedSequence(config.seed).spawn(config.n_clusters)
    clusters, effects, noises = [], {}, {}
    for i, stream in enumerate(streams):
        cluster_id = str(i)
        cluster, v, noise = _generate_cluster(config, cluster_id, stream)
        clusters.append(cluster)
        effects[cluster_id] = v
        noises[cluster_id] = noise
    study = validate_study(Study(tuple(clusters), config.p))

    table = None
    if all(c.size <= MAX_ENUMERATION_SIZE for c in clusters):
        tables = []
        for cluster in clusters:
            W = all_treatment_vectors(cluster.size)
            outcomes = np.vstack([config.outcome.mean(cluster.covariates, w) for w in W])
            if table_noise:
                outcomes = outcomes + noises[cluster.id][None, :]
            tables.append(ClusterOutcomeTable(cluster.id, cluster.covariates, outcomes))
        table = PotentialOutcomeTable(tuple(tables), noiseless=not table_noise or config.outcome.noise_sd == 0)
    else:
        logger.info("clusters above %d units; no potential-outcome table attached", MAX_ENUMERATION_SIZE)
    logger.debug("generated %d clusters, %d units", study.n_clusters, study.n)
    return SimulatedStudy(study, effects, config, table)


def true_estimands(
    sim: SimulatedStudy,
    policies: Sequence[Union[AllocationPolicy, float]],
    spillover_arm: int = 0,
) -> EstimandReport:
    """Exact μ(z, α) by policy-averaging the potential-outcome table.

    Raises:
        ClusterTooLargeError: no table (some cluster exceeds 12 units).
        NoisyTableError: the table carries realized noise.
    """
    table = sim.potential_outcomes
    if table is None:
        raise ClusterTooLargeError(f"exact estimands need clusters of at most {MAX_ENUMERATION_SIZE} units")
    if not table.noiseless:
        raise NoisyTableError("potential-outcome table includes realized noise")
    alphas = tuple(dict.fromkeys(p.alpha for p in as_policies(policies)))
    mu = {
        (z, a): float(np.mean([policy_average(c.outcomes, z, a) for c in table.clusters]))
        for a in alphas
        for z in (0, 1)
    }
    return EstimandReport.from_mu(mu, alphas, spillover_arm, cluster_ids=[c.cluster_id for c in table.clusters])


def truth_path(study_path: Union[str, Path]) -> Path:
    """Sidecar location: ``study.csv`` -> ``study.truth.json``."""
    study_path = Path(study_path)
    return study_path.with_name(study_path.stem + ".truth.json")


def save_simulation(sim: SimulatedStudy, path: Union[str, Path]) -> Tuple[Path, Path]:
    """Write the study in the long CSV schema plus its truth sidecar."""
    path = Path(path)
    save_study(sim.study, str(path), "csv")
    sidecar = truth_path(path)
    payload = {"config": sim.truth.to_dict(), "random_effects": sim.random_effects}
    with open(sidecar, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")
    return path, sidecar


def load_truth(path: Union[str, Path]) -> Tuple[DgpConfig, Dict[str, float]]:
    """Read a truth sidecar written by :func:`save_simulation`."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise StudyMismatchError(f"truth file {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(payload, dict) or "config" not in payload:
        raise StudyMismatchError(f"truth file {path} has no config")
    config = DgpConfig.from_dict(payload["config"])
    effects = {str(k): float(v) for k, v in payload.get("random_effects", {}).items()}
    return config, effects


def replicate_seeds(root_seed: int, n: int) -> List[int]:
    """Independent seeds for ``n`` replicate studies, spawned from one root."""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(root_seed).spawn(n)]


def within_cluster_correlation(study: Study) -> float:
    """Pearson correlation of treatments over all ordered pairs of distinct units in a cluster."""
    left, right = [], []
    for cluster in study.clusters:
        z = cluster.treatments
        n = len(z)
        if n < 2:
            continue
        i, j = np.where(~np.eye(n, dtype=bool))
        left.append(z[i])
        right.append(z[j])
    if not left:
        return float("nan")
    a, b = np.concatenate(left), np.concatenate(right)
    if a.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])
