import json

import numpy as np
import pytest
from click.testing import CliRunner

from interfere_ps.mixed_model import MixedModelFit
from interfere_ps.simulation import DgpConfig, generate
from interfere_ps.study_data import build_study, save_study


def linear_payload(**overrides):
    payload = {
        "n_clusters": 80,
        "cluster_size": {"uniform": [2, 4]},
        "p": 2,
        "propensity": {"kind": "linear", "beta": [0.5, -0.25]},
        "sigma2_v": 1.0,
        "outcome": {"intercept": 1.0, "tau": 2.0, "delta": 1.5, "loadings": [0.3, -0.2], "noise_sd": 0.0},
        "seed": 11,
    }
    payload.update(overrides)
    return payload


def nonlinear_payload(seed, n_clusters=1000):
    return linear_payload(
        n_clusters=n_clusters,
        cluster_size={"uniform": [2, 6]},
        p=1,
        propensity={"kind": "nonlinear", "function": "sin2x_half_x"},
        outcome={"intercept": 1.0, "tau": 2.0, "delta": 1.5, "loadings": [0.3], "noise_sd": 0.0},
        seed=seed,
    )


@pytest.fixture
def cli_runner():
    """Create a CLI runner for testing"""
    return CliRunner()


@pytest.fixture
def rng():
    """Seeded generator for randomized checks"""
    return np.random.default_rng(20240611)


@pytest.fixture
def linear_config():
    """Linear-truth simulation config with 80 small clusters"""
    return DgpConfig.from_dict(linear_payload())


@pytest.fixture
def simulated(linear_config):
    """Simulated study drawn from the linear config"""
    return generate(linear_config)


@pytest.fixture
def small_study():
    """Three hand-written clusters with two covariates and outcomes"""
    rows = [
        {"cluster_id": "a", "unit_id": 1, "treatment": 1, "outcome": 3.0, "covariates": [0.2, -1.0]},
        {"cluster_id": "a", "unit_id": 2, "treatment": 0, "outcome": 5.0, "covariates": [-0.4, 0.3]},
        {"cluster_id": "b", "unit_id": 1, "treatment": 0, "outcome": 1.5, "covariates": [1.1, 0.0]},
        {"cluster_id": "c", "unit_id": 7, "treatment": 1, "outcome": 2.0, "covariates": [0.0, 0.5]},
        {"cluster_id": "c", "unit_id": 3, "treatment": 1, "outcome": -1.0, "covariates": [0.9, -0.2]},
        {"cluster_id": "c", "unit_id": 5, "treatment": 0, "outcome": 0.5, "covariates": [-1.3, 0.8]},
    ]
    return build_study(rows, 2)


@pytest.fixture
def mixed_fit():
    """Mixed-model fit at known parameters"""
    return MixedModelFit(
        beta=np.array([0.5, -0.25]),
        sigma2_v=1.0,
        loglik=0.0,
        iterations=0,
        converged=True,
        grad_norm=0.0,
    )


@pytest.fixture
def study_csv(tmp_path, simulated):
    """Simulated study written as CSV"""
    path = tmp_path / "study.csv"
    save_study(simulated.study, str(path))
    return path


@pytest.fixture
def dgp_config_file(tmp_path):
    """Simulation config written as JSON"""
    path = tmp_path / "dgp.json"
    path.write_text(json.dumps(linear_payload()))
    return path


@pytest.fixture
def sample_config_file(tmp_path):
    """Create a sample settings file for testing"""
    config_path = tmp_path / "config.yaml"
    config_path.write_text(
        """
quadrature:
  nodes: 20
crossfit:
  folds: 3
  seed: 4
semiparametric:
  tol: 1e-6
"""
    )
    return config_path
