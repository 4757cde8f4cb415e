"""Cluster-level cross-fitting of the marginal propensity score.

Whole clusters are dealt into K folds; the learner for fold k is trained on
every cluster outside fold k and scores the units of fold k. No cluster is
ever scored by a learner that saw any of its units.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .errors import (
    DegenerateTrainingFoldError,
    InterferePSError,
    InvalidConfigError,
    StudyMismatchError,
    TooFewClustersError,
)
from .learners import EPSILON, PropensityLearner, clamp_probability
from .mixed_model import add_intercept
from .study_data import Study

logger = logging.getLogger(__name__)

GENERATOR = "numpy.random.PCG64"


@dataclass(frozen=True)
class FoldAssignment:
    fold_of_cluster: Mapping[str, int]
    k: int
    seed: int
    generator: str = GENERATOR

    def fold_sizes(self) -> List[int]:
        sizes = [0] * self.k
        for fold in self.fold_of_cluster.values():
            sizes[fold] += 1
        return sizes

    def clusters_in(self, fold: int) -> List[str]:
        return [cid for cid, f in self.fold_of_cluster.items() if f == fold]


def assign_folds(study: Study, k: int, seed: int) -> FoldAssignment:
    """Shuffle clusters with a seeded PCG64 stream, then deal them round-robin.

    Fold sizes differ by at most one cluster; the first ``I mod K`` folds get
    the extra cluster.

    Raises:
        InvalidConfigError: ``k < 2``.
        TooFewClustersError: more folds than clusters.
    """
    if k < 2:
        raise InvalidConfigError(f"need at least 2 folds, got {k}", key="folds")
    ids = study.cluster_ids
    if k > len(ids):
        raise TooFewClustersError(f"{k} folds requested for {len(ids)} clusters")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(ids))
    fold_of = {ids[int(cluster)]: rank % k for rank, cluster in enumerate(order)}
    # keep study order for stable iteration
    return FoldAssignment({cid: fold_of[cid] for cid in ids}, k, int(seed))


@dataclass(frozen=True)
class OutOfFoldScores:
    ehat: Mapping[Tuple[str, int], float]
    learner: str
    folds: FoldAssignment
    unit_ids: Mapping[Tuple[str, int], int]

    def as_array(self, study: Study) -> np.ndarray:
        """Scores aligned with the study's stacked unit order."""
        try:
            return np.array([self.ehat[key] for key in study.unit_keys()], dtype=float)
        except KeyError as exc:
            raise StudyMismatchError(f"no out-of-fold score for unit {exc.args[0]}") from exc

    def to_frame(self) -> pd.DataFrame:
        rows = [
            (cid, self.unit_ids[(cid, j)], value, self.folds.fold_of_cluster[cid])
            for (cid, j), value in self.ehat.items()
        ]
        return pd.DataFrame(rows, columns=["cluster_id", "unit_id", "ehat", "fold"])

    def save(self, path: str) -> None:
        frame = self.to_frame()
        frame["ehat"] = [repr(float(v)) for v in frame["ehat"]]
        frame.to_csv(path, index=False, lineterminator="\n")

    def to_dict(self) -> Dict[str, Any]:
        return {"learner": self.learner, "folds": self.folds.k, "seed": self.folds.seed}


def _training_rows(study: Study, excluded: set) -> np.ndarray:
    return np.array([c.id not in excluded for c in study.clusters for _ in c.units], dtype=bool)


def _fit_fold(fold: int, X: np.ndarray, z: np.ndarray, train: np.ndarray, test: np.ndarray, learner):
    if z[train].min() == z[train].max():
        raise DegenerateTrainingFoldError(
            f"fold {fold}: training clusters all have treatment {int(z[train][0])}"
        )
    try:
        fitted = learner.fit(X[train], z[train])
        return fold, fitted.predict(X[test])
    except InterferePSError as exc:
        raise exc.add_context(f"fold {fold}")


def crossfit_propensity(
    study: Study,
    folds: FoldAssignment,
    learner: PropensityLearner,
    intercept: bool = False,
    epsilon: float = EPSILON,
    n_jobs: int = 1,
) -> OutOfFoldScores:
    """Out-of-fold marginal propensity scores for every unit.

    Args:
        study: Validated study.
        folds: Cluster-to-fold assignment covering the study.
        learner: Any :class:`~interfere_ps.learners.PropensityLearner`.
        intercept: Give the learner a constant column.
        epsilon: Scores are clamped to [epsilon, 1 - epsilon].
        n_jobs: Fold fits run on this many threads; merge order is fixed.

    Returns:
        OutOfFoldScores keyed by (cluster id, unit index).

    Raises:
        DegenerateTrainingFoldError: a training complement has one treatment level.
        StudyMismatchError: the assignment does not cover the study.
    """
    missing = [cid for cid in study.cluster_ids if cid not in folds.fold_of_cluster]
    if missing:
        raise StudyMismatchError(f"clusters without a fold: {missing[:5]}")
    X, z, _ = study.stacked()
    if intercept:
        X = add_intercept(X)
    unit_fold = np.array(
        [folds.fold_of_cluster[c.id] for c in study.clusters for _ in c.units], dtype=int
    )

    jobs = []
    for fold in range(folds.k):
        test = unit_fold == fold
        jobs.append(delayed(_fit_fold)(fold, X, z, ~test, test, learner))
    results = Parallel(n_jobs=n_jobs, backend="threading")(jobs)

    scores = np.empty(len(z))
    for fold, predictions in sorted(results, key=lambda r: r[0]):
        scores[unit_fold == fold] = predictions
        logger.debug("fold %d: scored %d units", fold, int(np.sum(unit_fold == fold)))
    scores = clamp_probability(scores, epsilon)

    keys = study.unit_keys()
    unit_ids = {(c.id, u.unit_index): u.label for c in study.clusters for u in c.units}
    return OutOfFoldScores(
        ehat={key: float(v) for key, v in zip(keys, scores)},
        learner=getattr(learner, "label", type(learner).__name__),
        folds=folds,
        unit_ids=unit_ids,
    )


def read_scores(path: str, study: Study) -> np.ndarray:
    """Load a scores CSV written by :meth:`OutOfFoldScores.save`, aligned with the study.

    Raises:
        StudyMismatchError: a unit of the study has no score in the file.
    """
    try:
        frame = pd.read_csv(path, dtype={"cluster_id": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise StudyMismatchError(f"cannot read scores from {path}: {exc}") from exc
    missing = {"cluster_id", "unit_id", "ehat"} - set(frame.columns)
    if missing:
        raise StudyMismatchError(f"scores file lacks column(s) {', '.join(sorted(missing))}")
    lookup = {(str(c), int(u)): float(e) for c, u, e in zip(frame["cluster_id"], frame["unit_id"], frame["ehat"])}
    try:
        return np.array([lookup[(c.id, u.label)] for c in study.clusters for u in c.units])
    except KeyError as exc:
        raise StudyMismatchError(f"no score for unit {exc.args[0]}") from exc
