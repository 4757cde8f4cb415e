import json

import numpy as np
import pandas as pd
import pytest

from interfere_ps.__main__ import cli
from interfere_ps.errors import NotConvergedError
from interfere_ps.semiparametric import SemiparamFit

from .conftest import linear_payload


@pytest.fixture
def simulated_csv(cli_runner, tmp_path, dgp_config_file):
    """Study written by the simulate command, truth sidecar beside it"""
    out = tmp_path / "sim.csv"
    result = cli_runner.invoke(cli, ["simulate", str(dgp_config_file), str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_simulate_writes_study_and_sidecars(cli_runner, tmp_path):
    """Test simulate writes the CSV, truth sidecar and manifest"""
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps(linear_payload(n_clusters=2, cluster_size={"fixed": 2})))
    out = tmp_path / "tiny.csv"
    result = cli_runner.invoke(cli, ["simulate", str(config), str(out)])

    assert result.exit_code == 0, result.output
    lines = out.read_text().splitlines()
    assert lines[0] == "cluster_id,unit_id,treatment,outcome,x1,x2"
    assert len(lines) == 5
    truth = json.loads((tmp_path / "tiny.truth.json").read_text())
    assert set(truth["random_effects"]) == {"0", "1"}
    manifest = json.loads((tmp_path / "tiny.manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["seed"] == 11
    assert manifest["status"] == "ok"


def test_simulate_is_reproducible(cli_runner, tmp_path, dgp_config_file):
    """Test two runs with the same config write identical bytes"""
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    cli_runner.invoke(cli, ["simulate", str(dgp_config_file), str(first)])
    cli_runner.invoke(cli, ["simulate", str(dgp_config_file), str(second)])
    assert first.read_bytes() == second.read_bytes()


def test_simulate_rejects_malformed_config(cli_runner, tmp_path):
    """Test a broken JSON config exits with the config error code"""
    config = tmp_path / "broken.json"
    config.write_text("{\"n_clusters\": ")
    result = cli_runner.invoke(cli, ["simulate", str(config), str(tmp_path / "out.csv")])
    assert result.exit_code == 2
    assert "InvalidConfigError" in result.output


@pytest.mark.parametrize("model", ["mixed", "logistic"])
def test_fit_writes_model_json(cli_runner, tmp_path, study_csv, model):
    """Test fit writes the fitted parameters and a manifest"""
    out = tmp_path / f"{model}.json"
    result = cli_runner.invoke(cli, ["fit", str(study_csv), "--model", model, "--out", str(out)])

    assert result.exit_code == 0, result.output
    payload = json.loads(out.read_text())
    assert payload["model"] == model
    assert len(payload["beta"]) == 2
    assert (tmp_path / f"{model}.manifest.json").exists()


def test_fit_single_treatment_level(cli_runner, tmp_path):
    """Test an all-treated study exits with the numerical error code"""
    study = tmp_path / "treated.csv"
    study.write_text(
        "cluster_id,unit_id,treatment,outcome,x1\n"
        "a,0,1,1.0,0.3\n"
        "a,1,1,2.0,-0.1\n"
        "b,0,1,0.5,1.2\n"
    )
    result = cli_runner.invoke(cli, ["fit", str(study), "--out", str(tmp_path / "fit.json")])
    assert result.exit_code == 4
    assert "SeparationDetectedError" in result.output


def test_fit_with_settings_file(cli_runner, tmp_path, study_csv, sample_config_file):
    """Test the global --config option feeds the command"""
    out = tmp_path / "fit.json"
    result = cli_runner.invoke(
        cli, ["--config", str(sample_config_file), "fit", str(study_csv), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    manifest = json.loads((tmp_path / "fit.manifest.json").read_text())
    assert manifest["config"]["quadrature_nodes"] == 20


def test_bad_settings_file(cli_runner, tmp_path, study_csv):
    """Test an unknown settings key exits with the config error code"""
    settings = tmp_path / "bad.yaml"
    settings.write_text("quadrature:\n  points: 4\n")
    result = cli_runner.invoke(cli, ["--config", str(settings), "fit", str(study_csv), "--out", "x.json"])
    assert result.exit_code == 2


def test_semiparam_writes_fit_and_scores(cli_runner, tmp_path, study_csv):
    """Test semiparam writes out-of-fold scores and the f table"""
    out = tmp_path / "semi.json"
    result = cli_runner.invoke(cli, ["semiparam", str(study_csv), "--folds", "4", "--seed", "2", "--out", str(out)])

    assert result.exit_code == 0, result.output
    payload = json.loads(out.read_text())
    assert payload["model"] == "semiparametric"
    assert payload["converged"] is True
    scores = pd.read_csv(tmp_path / "semi.scores.csv")
    assert list(scores.columns) == ["cluster_id", "unit_id", "ehat", "fold"]
    assert len(scores) == len(payload["f"])
    assert set(scores["fold"]) == {0, 1, 2, 3}


def test_semiparam_rejects_single_fold(cli_runner, tmp_path, study_csv):
    """Test --folds 1 is a usage error"""
    result = cli_runner.invoke(cli, ["semiparam", str(study_csv), "--folds", "1", "--out", str(tmp_path / "s.json")])
    assert result.exit_code == 2


def test_estimate_with_truth(cli_runner, tmp_path, simulated_csv):
    """Test estimate reads the truth sidecar by default and writes JSON and CSV"""
    out = tmp_path / "report.json"
    result = cli_runner.invoke(
        cli,
        ["estimate", str(simulated_csv), "--cps-source", "truth", "--alpha", "0.3", "--alpha", "0.7", "--out", str(out)],
    )

    assert result.exit_code == 0, result.output
    payload = json.loads(out.read_text())
    assert payload["cps_source"] == "truth"
    assert payload["n_clusters"] == 80
    frame = pd.read_csv(tmp_path / "report.csv")
    assert list(frame.columns) == ["estimand", "z", "alpha", "alpha_prime", "value", "std_error"]
    assert len(frame) == 4 + 2 + 4


def test_estimate_with_mixed_fit(cli_runner, tmp_path, simulated_csv):
    """Test the fit JSON from fit feeds estimate"""
    fit_path = tmp_path / "fit.json"
    assert cli_runner.invoke(cli, ["fit", str(simulated_csv), "--out", str(fit_path)]).exit_code == 0
    out = tmp_path / "mixed_report.json"
    result = cli_runner.invoke(
        cli,
        ["estimate", str(simulated_csv), "--cps-source", "mixed", "--cps-file", str(fit_path),
         "--alpha", "0.5", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(out.read_text())
    assert payload["direct_effect"][0]["alpha"] == 0.5


def test_estimate_with_semiparametric_fit(cli_runner, tmp_path, simulated_csv):
    """Test the semiparametric fit JSON feeds estimate"""
    fit_path = tmp_path / "semi.json"
    assert cli_runner.invoke(cli, ["semiparam", str(simulated_csv), "--out", str(fit_path)]).exit_code == 0
    out = tmp_path / "semi_report.json"
    result = cli_runner.invoke(
        cli,
        ["estimate", str(simulated_csv), "--cps-source", "semiparam", "--cps-file", str(fit_path),
         "--alpha", "0.4", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output


def test_estimate_needs_cps_file(cli_runner, tmp_path, simulated_csv):
    """Test fitted CPS sources require --cps-file"""
    result = cli_runner.invoke(
        cli, ["estimate", str(simulated_csv), "--cps-source", "mixed", "--alpha", "0.5", "--out", str(tmp_path / "r.json")]
    )
    assert result.exit_code == 2


def test_estimate_rejects_wrong_model_file(cli_runner, tmp_path, simulated_csv):
    """Test a logistic fit passed as a mixed-model CPS"""
    fit_path = tmp_path / "logit.json"
    cli_runner.invoke(cli, ["fit", str(simulated_csv), "--model", "logistic", "--out", str(fit_path)])
    result = cli_runner.invoke(
        cli,
        ["estimate", str(simulated_csv), "--cps-source", "mixed", "--cps-file", str(fit_path),
         "--alpha", "0.5", "--out", str(tmp_path / "r.json")],
    )
    assert result.exit_code == 3
    assert "StudyMismatchError" in result.output


@pytest.mark.parametrize("alpha", ["0", "1", "1.2"])
def test_estimate_rejects_boundary_allocations(cli_runner, tmp_path, simulated_csv, alpha):
    """Test allocations outside (0, 1) exit with the config error code"""
    result = cli_runner.invoke(
        cli,
        ["estimate", str(simulated_csv), "--cps-source", "truth", "--alpha", alpha, "--out", str(tmp_path / "r.json")],
    )
    assert result.exit_code == 2


def test_balance_table(cli_runner, tmp_path, study_csv):
    """Test balance reads the scores file written by semiparam"""
    assert cli_runner.invoke(cli, ["semiparam", str(study_csv), "--out", str(tmp_path / "semi.json")]).exit_code == 0
    out = tmp_path / "balance.csv"
    result = cli_runner.invoke(
        cli, ["balance", str(study_csv), "--scores", str(tmp_path / "semi.scores.csv"), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out)
    assert list(frame["covariate"]) == ["x1", "x2"]
    assert (tmp_path / "balance.manifest.json").exists()


def test_semiparam_keeps_partial_fit(cli_runner, tmp_path, study_csv, mocker):
    """Test a non-converged loop still writes the last iterate and flags the manifest"""
    partial = SemiparamFit({("0", 0): 0.1}, 0.8, (1.2,), 100, False)
    mocker.patch(
        "interfere_ps.__main__.fit_semiparametric",
        side_effect=NotConvergedError("semiparametric loop did not converge", fit=partial),
    )
    out = tmp_path / "semi.json"
    result = cli_runner.invoke(cli, ["semiparam", str(study_csv), "--out", str(out)])

    assert result.exit_code == 4
    assert json.loads(out.read_text())["converged"] is False
    manifest = json.loads((tmp_path / "semi.manifest.json").read_text())
    assert manifest["status"] == "not_converged"


def run_twice(cli_runner, tmp_path, args_for):
    """Run a command into two directories and return the output paths"""
    paths = []
    for name in ("first", "second"):
        folder = tmp_path / name
        folder.mkdir()
        result = cli_runner.invoke(cli, ["--threads", "1", *args_for(folder)])
        assert result.exit_code == 0, result.output
        paths.append(folder)
    return paths


@pytest.mark.parametrize("model", ["mixed", "logistic"])
def test_fit_is_reproducible(cli_runner, tmp_path, study_csv, model):
    """Test repeated fits write identical JSON"""
    first, second = run_twice(
        cli_runner, tmp_path, lambda d: ["fit", str(study_csv), "--model", model, "--out", str(d / "fit.json")]
    )
    assert (first / "fit.json").read_bytes() == (second / "fit.json").read_bytes()


def test_semiparam_is_reproducible(cli_runner, tmp_path, study_csv):
    """Test repeated semiparametric runs write identical scores and fits"""
    first, second = run_twice(
        cli_runner, tmp_path, lambda d: ["semiparam", str(study_csv), "--seed", "3", "--out", str(d / "semi.json")]
    )
    assert (first / "semi.scores.csv").read_bytes() == (second / "semi.scores.csv").read_bytes()
    assert (first / "semi.json").read_bytes() == (second / "semi.json").read_bytes()


def test_estimate_is_reproducible(cli_runner, tmp_path, simulated_csv):
    """Test repeated estimates write identical reports"""
    first, second = run_twice(
        cli_runner,
        tmp_path,
        lambda d: ["estimate", str(simulated_csv), "--cps-source", "truth", "--alpha", "0.3", "--alpha", "0.6",
                   "--out", str(d / "report.json")],
    )
    assert (first / "report.json").read_bytes() == (second / "report.json").read_bytes()
    assert (first / "report.csv").read_bytes() == (second / "report.csv").read_bytes()


def test_semiparam_with_intercept(cli_runner, tmp_path, study_csv):
    """Test --intercept reaches the cross-fitted learner"""
    plain, shifted = tmp_path / "plain.json", tmp_path / "shifted.json"
    assert cli_runner.invoke(cli, ["semiparam", str(study_csv), "--out", str(plain)]).exit_code == 0
    result = cli_runner.invoke(cli, ["semiparam", str(study_csv), "--intercept", "--out", str(shifted)])

    assert result.exit_code == 0, result.output
    manifest = json.loads((tmp_path / "shifted.manifest.json").read_text())
    assert manifest["config"]["intercept"] is True
    with_constant = pd.read_csv(tmp_path / "shifted.scores.csv")["ehat"]
    without = pd.read_csv(tmp_path / "plain.scores.csv")["ehat"]
    assert not np.allclose(with_constant, without)
