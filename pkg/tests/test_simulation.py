import json

import numpy as np
import pytest

from interfere_ps.errors import ClusterTooLargeError, InvalidConfigError, NoisyTableError
from interfere_ps.estimands import policy_average
from interfere_ps.simulation import (
    DgpConfig,
    SizeLaw,
    generate,
    load_dgp_config,
    load_truth,
    replicate_seeds,
    save_simulation,
    true_estimands,
    truth_path,
    within_cluster_correlation,
)
from interfere_ps.study_data import load_study

from .conftest import linear_payload


def config(**overrides):
    return DgpConfig.from_dict(linear_payload(**overrides))


def test_generate_is_deterministic(linear_config):
    """Test identical configs draw identical studies"""
    first, second = generate(linear_config), generate(linear_config)
    assert first.study == second.study
    assert first.random_effects == second.random_effects
    for a, b in zip(first.potential_outcomes.clusters, second.potential_outcomes.clusters):
        np.testing.assert_array_equal(a.outcomes, b.outcomes)


def test_generate_changes_with_seed():
    """Test a different seed draws a different study"""
    assert generate(config(seed=1)).study != generate(config(seed=2)).study


def test_generate_layout(simulated, linear_config):
    """Test cluster ids, sizes and unit ids follow the config"""
    study = simulated.study
    assert study.cluster_ids == [str(i) for i in range(linear_config.n_clusters)]
    assert all(2 <= c.size <= 4 for c in study.clusters)
    assert [u.unit_id for u in study.clusters[0].units] == list(range(study.clusters[0].size))
    assert set(simulated.random_effects) == set(study.cluster_ids)


def test_table_matches_observed_outcomes(simulated):
    """Test the potential outcome at the realized vector equals the observed outcome"""
    for cluster in simulated.study.clusters:
        table = simulated.potential_outcomes.cluster(cluster.id)
        assert table.outcomes.shape == (2 ** cluster.size, cluster.size)
        np.testing.assert_allclose(table.response(cluster.treatments), cluster.outcomes, atol=1e-12)


def test_noisy_table_matches_observed_outcomes():
    """Test carried noise keeps the table consistent but flags it"""
    noisy = generate(config(outcome={"intercept": 0.0, "tau": 1.0, "delta": 0.5, "noise_sd": 2.0}), table_noise=True)
    assert not noisy.potential_outcomes.noiseless
    for cluster in noisy.study.clusters:
        table = noisy.potential_outcomes.cluster(cluster.id)
        np.testing.assert_allclose(table.response(cluster.treatments), cluster.outcomes, atol=1e-12)
    with pytest.raises(NoisyTableError):
        true_estimands(noisy, [0.5])


def test_true_estimands_closed_forms(simulated):
    """Test DE equals tau and SE equals delta times the allocation gap"""
    report = true_estimands(simulated, [0.3, 0.5, 0.7])
    for a in (0.3, 0.5, 0.7):
        assert report.direct_effect[a] == pytest.approx(2.0, abs=1e-12)
    assert report.spillover_effect[(0.7, 0.3)] == pytest.approx(0.6, abs=1e-12)
    assert report.spillover_effect[(0.3, 0.7)] == pytest.approx(-0.6, abs=1e-12)


def test_null_effects_give_zero_truth():
    """Test tau = delta = 0 gives zero direct and spillover effects"""
    sim = generate(config(outcome={"intercept": 1.0, "tau": 0.0, "delta": 0.0, "loadings": [1.0, 1.0]}))
    report = true_estimands(sim, [0.2, 0.9])
    assert report.direct_effect[0.2] == pytest.approx(0.0, abs=1e-12)
    assert report.spillover_effect[(0.9, 0.2)] == pytest.approx(0.0, abs=1e-12)


def test_large_clusters_have_no_table():
    """Test clusters above twelve units skip the table"""
    sim = generate(config(n_clusters=3, cluster_size={"fixed": 14}))
    assert sim.potential_outcomes is None
    with pytest.raises(ClusterTooLargeError):
        true_estimands(sim, [0.5])


def test_no_random_effect_means_no_correlation():
    """Test sigma2 = 0 leaves treatments uncorrelated within clusters"""
    study = generate(config(n_clusters=2000, cluster_size={"fixed": 4}, sigma2_v=0.0)).study
    assert abs(within_cluster_correlation(study)) < 0.03


def test_larger_variance_means_more_correlation():
    """Test sigma2 = 4 correlates treatments more than sigma2 = 0.25 on the same seed"""
    low = generate(config(n_clusters=1000, cluster_size={"fixed": 4}, sigma2_v=0.25)).study
    high = generate(config(n_clusters=1000, cluster_size={"fixed": 4}, sigma2_v=4.0)).study
    assert within_cluster_correlation(high) > within_cluster_correlation(low)


@pytest.mark.parametrize(
    "overrides, key",
    [
        ({"n_clusters": 0}, "n_clusters"),
        ({"sigma2_v": -1.0}, "sigma2_v"),
        ({"cluster_size": {"poisson": 3}}, "cluster_size.poisson"),
        ({"propensity": {"kind": "linear", "beta": [1.0]}}, "propensity.beta"),
        ({"propensity": {"kind": "nonlinear", "function": "cos"}}, "propensity.function"),
        ({"outcome": {"noise_sd": -0.5}}, "outcome.noise_sd"),
        ({"colour": "red"}, "colour"),
    ],
)
def test_invalid_config_names_the_key(overrides, key):
    """Test config validation points at the offending key"""
    with pytest.raises(InvalidConfigError) as excinfo:
        config(**overrides)
    assert excinfo.value.key == key


def test_missing_key_is_reported():
    """Test a config without a required key"""
    payload = linear_payload()
    del payload["sigma2_v"]
    with pytest.raises(InvalidConfigError) as excinfo:
        DgpConfig.from_dict(payload)
    assert excinfo.value.key == "sigma2_v"


def test_config_dict_roundtrip(linear_config):
    """Test to_dict feeds back into from_dict"""
    assert DgpConfig.from_dict(json.loads(json.dumps(linear_config.to_dict()))) == linear_config
    assert SizeLaw.from_dict({"fixed": 3}).fixed


def test_load_dgp_config(tmp_path, dgp_config_file, linear_config):
    """Test reading configs from JSON files"""
    assert load_dgp_config(dgp_config_file) == linear_config
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(InvalidConfigError):
        load_dgp_config(broken)


def test_save_simulation_writes_sidecar(tmp_path, simulated):
    """Test the study CSV and the truth sidecar load back"""
    path, sidecar = save_simulation(simulated, tmp_path / "sim.csv")
    assert sidecar == truth_path(path) == tmp_path / "sim.truth.json"
    assert load_study(str(path)) == simulated.study
    truth, effects = load_truth(sidecar)
    assert truth == simulated.truth
    assert effects == pytest.approx(simulated.random_effects)


def test_replicate_seeds():
    """Test replicate seeds are reproducible and distinct"""
    seeds = replicate_seeds(3, 50)
    assert seeds == replicate_seeds(3, 50)
    assert len(set(seeds)) == 50


def test_nonlinear_truth_uses_first_covariate():
    """Test the named nonlinear propensity only reads the first covariate"""
    truth = config(propensity={"kind": "nonlinear", "function": "sin2x"}).propensity
    X = np.array([[0.3, 5.0], [0.3, -5.0]])
    eta = truth.eta(X)
    assert eta[0] == eta[1] == pytest.approx(np.sin(0.6))


@pytest.mark.slow
def test_policy_average_matches_monte_carlo(rng):
    """Test the exact policy average on a nonlinear table against random peer draws"""
    outcomes = rng.normal(size=(8, 3))
    alpha = 0.35
    exact = policy_average(outcomes, 1, alpha)
    draws = 1_000_000
    unit = rng.integers(0, 3, draws)
    peers = (rng.random((draws, 3)) < alpha).astype(int)
    peers[np.arange(draws), unit] = 1
    index = peers @ np.array([4, 2, 1])
    values = outcomes[index, unit]
    assert abs(values.mean() - exact) < 4 * values.std(ddof=1) / np.sqrt(draws)
