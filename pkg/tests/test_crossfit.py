import numpy as np
import pytest

from interfere_ps.crossfit import assign_folds, crossfit_propensity, read_scores
from interfere_ps.errors import (
    DegenerateTrainingFoldError,
    InvalidConfigError,
    StudyMismatchError,
    TooFewClustersError,
)
from interfere_ps.learners import EPSILON, LogisticLearner, expit
from interfere_ps.simulation import DgpConfig, generate
from interfere_ps.study_data import build_study

from .conftest import linear_payload


def pairs_study(n_clusters, treatment=lambda i, j: (i + j) % 2):
    rows = [
        {"cluster_id": str(i), "unit_id": j, "treatment": treatment(i, j), "covariates": [float(i + j) / 10]}
        for i in range(n_clusters)
        for j in range(2)
    ]
    return build_study(rows, 1)


def test_folds_are_balanced_and_cover_every_cluster(rng):
    """Test fold sizes differ by at most one and every cluster gets one fold"""
    for _ in range(25):
        n_clusters = int(rng.integers(2, 60))
        k = int(rng.integers(2, n_clusters + 1))
        study = pairs_study(n_clusters)
        folds = assign_folds(study, k, int(rng.integers(0, 2 ** 31)))
        sizes = folds.fold_sizes()
        assert sum(sizes) == n_clusters
        assert max(sizes) - min(sizes) <= 1
        assert set(folds.fold_of_cluster) == set(study.cluster_ids)
        assert sorted(sum((folds.clusters_in(f) for f in range(k)), [])) == sorted(study.cluster_ids)


def test_fold_assignment_is_seeded():
    """Test the same seed gives the same folds"""
    study = pairs_study(30)
    assert assign_folds(study, 5, 7) == assign_folds(study, 5, 7)
    assert assign_folds(study, 5, 7).fold_of_cluster != assign_folds(study, 5, 8).fold_of_cluster


def test_fold_count_validation():
    """Test k < 2 and more folds than clusters"""
    study = pairs_study(3)
    with pytest.raises(InvalidConfigError) as excinfo:
        assign_folds(study, 1, 0)
    assert excinfo.value.key == "folds"
    with pytest.raises(TooFewClustersError):
        assign_folds(study, 4, 0)


def test_scores_cover_units_and_are_clamped(simulated):
    """Test every unit gets a score inside the clamp band"""
    study = simulated.study
    scores = crossfit_propensity(study, assign_folds(study, 5, 3), LogisticLearner())
    values = scores.as_array(study)
    assert values.shape == (study.n,)
    assert np.all(values >= EPSILON) and np.all(values <= 1 - EPSILON)
    assert scores.learner == "logistic"


def test_scores_do_not_leak_within_fold(simulated):
    """Test perturbing a cluster's treatments leaves its own scores unchanged"""
    study = simulated.study
    folds = assign_folds(study, 4, 9)
    base = crossfit_propensity(study, folds, LogisticLearner())
    target = study.clusters[0].id
    flipped_rows = [
        {
            "cluster_id": c.id,
            "unit_id": u.unit_id,
            "treatment": 1 - u.treatment if c.id == target else u.treatment,
            "outcome": u.outcome,
            "covariates": list(u.covariates),
        }
        for c in study.clusters
        for u in c.units
    ]
    flipped = build_study(flipped_rows, study.p)
    again = crossfit_propensity(flipped, folds, LogisticLearner())
    for unit in study.cluster(target).units:
        key = (target, unit.unit_index)
        assert again.ehat[key] == base.ehat[key]
    same_fold = folds.clusters_in(folds.fold_of_cluster[target])
    other = next(cid for cid in study.cluster_ids if cid not in same_fold)
    assert again.ehat[(other, 0)] != base.ehat[(other, 0)]


def test_threads_give_identical_scores(simulated):
    """Test fold fits on several threads merge in fold order"""
    study = simulated.study
    folds = assign_folds(study, 5, 1)
    serial = crossfit_propensity(study, folds, LogisticLearner())
    threaded = crossfit_propensity(study, folds, LogisticLearner(), n_jobs=3)
    assert serial.ehat == threaded.ehat


def test_degenerate_training_fold():
    """Test a training complement with a single treatment level names the fold"""
    study = pairs_study(4, treatment=lambda i, j: 1)
    with pytest.raises(DegenerateTrainingFoldError) as excinfo:
        crossfit_propensity(study, assign_folds(study, 2, 0), LogisticLearner())
    assert "fold 0" in str(excinfo.value)


def test_missing_fold_for_cluster(simulated):
    """Test an assignment built for another study"""
    other = generate(DgpConfig.from_dict(linear_payload(n_clusters=120))).study
    folds = assign_folds(simulated.study, 5, 0)
    with pytest.raises(StudyMismatchError):
        crossfit_propensity(other, folds, LogisticLearner())


def test_saved_scores_read_back(tmp_path, simulated):
    """Test the scores CSV lines up with the study again"""
    study = simulated.study
    scores = crossfit_propensity(study, assign_folds(study, 3, 2), LogisticLearner())
    path = tmp_path / "scores.csv"
    scores.save(str(path))
    np.testing.assert_array_equal(read_scores(str(path), study), scores.as_array(study))
    assert list(scores.to_frame().columns) == ["cluster_id", "unit_id", "ehat", "fold"]


def test_read_scores_rejects_other_study(tmp_path, small_study):
    """Test a scores file missing units of the study"""
    path = tmp_path / "scores.csv"
    path.write_text("cluster_id,unit_id,ehat,fold\na,1,0.5,0\n")
    with pytest.raises(StudyMismatchError):
        read_scores(str(path), small_study)


def test_logistic_learner_tracks_logistic_truth():
    """Test out-of-fold scores against the generating propensity"""
    payload = linear_payload(n_clusters=500, cluster_size={"uniform": [2, 6]}, sigma2_v=0.0)
    study = generate(DgpConfig.from_dict(payload)).study
    scores = crossfit_propensity(study, assign_folds(study, 5, 0), LogisticLearner()).as_array(study)
    X, _, _ = study.stacked()
    truth = expit(X @ np.array([0.5, -0.25]))
    assert np.mean((scores - truth) ** 2) < 0.005


def test_constant_truth_gives_flat_scores():
    """Test a fair-coin propensity keeps every score near one half"""
    payload = linear_payload(
        n_clusters=5000,
        cluster_size={"fixed": 4},
        p=1,
        propensity={"kind": "linear", "beta": [0.0]},
        sigma2_v=0.0,
        outcome={"intercept": 0.0, "tau": 1.0, "delta": 0.0},
    )
    study = generate(DgpConfig.from_dict(payload)).study
    scores = crossfit_propensity(study, assign_folds(study, 5, 0), LogisticLearner()).as_array(study)
    assert np.all(np.abs(scores - 0.5) < 0.05)
