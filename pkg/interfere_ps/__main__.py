import functools
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
from rich.table import Table

from .config import Settings, load_settings, resolve_threads
from .console import configure_logging, console, error_console
from .crossfit import assign_folds, crossfit_propensity, read_scores
from .diagnostics import covariate_balance
from .errors import InterferePSError, NotConvergedError, StudyMismatchError
from .estimands import (
    IndependentLogisticCps,
    MixedModelCps,
    SemiparametricCps,
    estimate,
)
from .learners import LEARNERS, LogisticFit, fit_logistic, make_learner
from .manifest import RunManifest
from .mixed_model import MixedModelFit, add_intercept, fit_mixed
from .semiparametric import SemiparamFit, fit_semiparametric
from .simulation import TrueCps, generate, load_dgp_config, load_truth, save_simulation, truth_path
from .study_data import Study, load_study

CPS_SOURCES = ("mixed", "semiparam", "logistic", "truth")


@dataclass
class RunContext:
    settings: Settings
    threads: int


def sibling(path: Path, suffix: str) -> Path:
    """``out/fit.json`` + ``.scores.csv`` -> ``out/fit.scores.csv``."""
    return path.with_name(path.stem + suffix)


def write_json(payload: Dict[str, Any], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")


def read_json(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise StudyMismatchError(f"{path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(payload, dict):
        raise StudyMismatchError(f"{path} does not hold a JSON object")
    return payload


def fail(exc: InterferePSError) -> None:
    error_console.print(f"[bold red]{type(exc).__name__}:[/] {exc}")
    sys.exit(exc.exit_code)


def reports_errors(command: Callable) -> Callable:
    """Turn library errors into a one-line diagnostic and the family's exit code."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except InterferePSError as exc:
            fail(exc)

    return wrapper


def summary_table(title: str, rows: List[Tuple[str, Any]]) -> Table:
    table = Table(title=title, show_header=False)
    table.add_column("field", style="cyan")
    table.add_column("value")
    for name, value in rows:
        table.add_row(name, str(value))
    return table


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML settings file")
@click.option("--verbose", "-v", is_flag=True, help="Log fit progress at DEBUG level")
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    envvar="INTERFERE_PS_THREADS",
    help="Threads for likelihood sums and fold fits (env INTERFERE_PS_THREADS)",
)
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], verbose: bool, threads: Optional[int]):
    """interfere-ps - propensity scores for clustered studies with interference."""
    configure_logging(verbose)
    try:
        settings = load_settings(config_path)
        ctx.obj = RunContext(settings, resolve_threads(threads, settings))
    except InterferePSError as exc:
        fail(exc)


@cli.command()
@click.argument("dgp_config", type=click.Path(exists=True, dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--table-noise", is_flag=True, help="Carry realized noise into the potential-outcome table")
@click.pass_obj
@reports_errors
def simulate(run: RunContext, dgp_config: str, out: str, table_noise: bool):
    """Draw a study from a JSON simulation config and write it as CSV.

    DGP_CONFIG: simulation config (JSON)
    OUT: study CSV; the truth sidecar and manifest are written beside it
    """
    config = load_dgp_config(dgp_config)
    manifest = RunManifest("simulate", {"dgp": config.to_dict(), "table_noise": table_noise}, seed=config.seed)
    sim = generate(config, table_noise=table_noise)
    study_path, sidecar = save_simulation(sim, out)
    manifest.inputs = [dgp_config]
    manifest.outputs = [str(study_path), str(sidecar)]
    manifest.finish().write(study_path)
    console.print(
        summary_table(
            "Simulated study",
            [("clusters", sim.study.n_clusters), ("units", sim.study.n), ("seed", config.seed), ("output", study_path)],
        )
    )


@cli.command()
@click.argument("study_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--model", type=click.Choice(["logistic", "mixed"]), default="mixed", show_default=True)
@click.option("--quadrature-nodes", type=click.IntRange(min=1), help="Gauss-Hermite nodes (default from settings)")
@click.option("--intercept", is_flag=True, help="Add a constant covariate")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Fit JSON")
@click.pass_obj
@reports_errors
def fit(run: RunContext, study_path: str, model: str, quadrature_nodes: Optional[int], intercept: bool, out: str):
    """Fit the independent-logistic or mixed-effects propensity model."""
    settings = run.settings
    nodes = quadrature_nodes or settings.quadrature.nodes
    manifest = RunManifest(
        "fit",
        {"model": model, "quadrature_nodes": nodes, "intercept": intercept, "settings": settings.to_dict()},
        inputs=[study_path],
    )
    study = load_study(study_path)
    if model == "logistic":
        X, z, _ = study.stacked()
        opts = settings.logistic
        result = fit_logistic(add_intercept(X) if intercept else X, z, opts.max_iter, opts.grad_tol, opts.beta_bound)
        payload = {**result.to_dict(), "intercept": intercept}
        rows = [("beta", [round(b, 6) for b in result.beta]), ("loglik", round(result.loglik, 6))]
    else:
        result = fit_mixed(study, nodes, settings.mixed, intercept, run.threads)
        payload = result.to_dict()
        rows = [
            ("beta", [round(b, 6) for b in result.beta]),
            ("sigma2_v", round(result.sigma2_v, 6)),
            ("loglik", round(result.loglik, 6)),
            ("boundary", result.boundary),
        ]
    out_path = Path(out)
    write_json(payload, out_path)
    manifest.outputs = [str(out_path)]
    manifest.finish().write(out_path)
    console.print(summary_table(f"{model} fit", rows + [("iterations", result.iterations), ("output", out_path)]))


@cli.command()
@click.argument("study_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--learner", type=click.Choice(sorted(LEARNERS)), help="Marginal propensity learner")
@click.option("--folds", type=click.IntRange(min=2), help="Cross-fitting folds (at least 2)")
@click.option("--seed", type=click.IntRange(min=0), help="Fold-assignment seed")
@click.option("--quadrature-nodes", type=click.IntRange(min=1), help="Gauss-Hermite nodes")
@click.option("--intercept", is_flag=True, help="Give the cross-fitted learner a constant covariate")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Semiparametric fit JSON")
@click.pass_obj
@reports_errors
def semiparam(
    run: RunContext,
    study_path: str,
    learner: Optional[str],
    folds: Optional[int],
    seed: Optional[int],
    quadrature_nodes: Optional[int],
    intercept: bool,
    out: str,
):
    """Cross-fit the marginal score, then solve for f and the random-effect variance.

    Writes the out-of-fold scores next to OUT as ``<name>.scores.csv``.
    """
    settings = run.settings
    learner = learner or settings.crossfit.learner
    folds = folds or settings.crossfit.folds
    seed = settings.crossfit.seed if seed is None else seed
    nodes = quadrature_nodes or settings.quadrature.nodes
    out_path = Path(out)
    scores_path = sibling(out_path, ".scores.csv")
    manifest = RunManifest(
        "semiparam",
        {
            "learner": learner,
            "folds": folds,
            "quadrature_nodes": nodes,
            "intercept": intercept,
            "settings": settings.to_dict(),
        },
        seed=seed,
        inputs=[study_path],
        outputs=[str(scores_path), str(out_path)],
    )

    study = load_study(study_path)
    assignment = assign_folds(study, folds, seed)
    scores = crossfit_propensity(
        study,
        assignment,
        make_learner(learner, settings),
        intercept=intercept,
        epsilon=settings.kernel.epsilon,
        n_jobs=run.threads,
    )
    scores.save(scores_path)
    try:
        result = fit_semiparametric(study, scores, nodes, settings.semiparametric, settings.mixed, run.threads)
    except NotConvergedError as exc:
        if isinstance(exc.fit, SemiparamFit):
            write_json(exc.fit.to_dict(), out_path)
            manifest.finish(status="not_converged").write(out_path)
        raise
    write_json(result.to_dict(), out_path)
    manifest.finish().write(out_path)
    console.print(
        summary_table(
            "Semiparametric fit",
            [
                ("learner", learner),
                ("folds", folds),
                ("sigma2_v", round(result.sigma2_v, 6)),
                ("iterations", result.iterations),
                ("final gamma", round(result.gamma_trace[-1], 9)),
                ("output", out_path),
            ],
        )
    )


def _expect_model(payload: Dict[str, Any], model: str, path: Path) -> None:
    if payload.get("model") != model:
        raise StudyMismatchError(f"{path} holds a {payload.get('model')!r} fit, expected {model!r}")


def load_cps(source: str, cps_file: Path, study: Study, nodes: int):
    """Build the CPS provider named by ``--cps-source`` and check it fits the study."""
    if source == "truth":
        config, _ = load_truth(cps_file)
        if config.p != study.p:
            raise StudyMismatchError(f"truth has p={config.p}, study has p={study.p}")
        return TrueCps(config, nodes)
    payload = read_json(cps_file)
    if source == "mixed":
        _expect_model(payload, "mixed", cps_file)
        fit = MixedModelFit.from_dict(payload)
        if len(fit.beta) != study.p + int(fit.intercept):
            raise StudyMismatchError(f"fit has {len(fit.beta)} coefficients for a study with p={study.p}")
        return MixedModelCps(fit, nodes)
    if source == "logistic":
        _expect_model(payload, "logistic", cps_file)
        intercept = bool(payload.get("intercept", False))
        fit = LogisticFit.from_dict(payload)
        if len(fit.beta) != study.p + int(intercept):
            raise StudyMismatchError(f"fit has {len(fit.beta)} coefficients for a study with p={study.p}")
        return IndependentLogisticCps(fit, intercept)
    _expect_model(payload, "semiparametric", cps_file)
    semi = SemiparamFit.from_dict(payload, study)
    for cluster in study.clusters:
        semi.f_for(cluster.id, cluster.size)
    return SemiparametricCps(semi, nodes)


@cli.command(name="estimate")
@click.argument("study_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--cps-source", type=click.Choice(CPS_SOURCES), required=True, help="Where the CPS comes from")
@click.option(
    "--cps-file",
    type=click.Path(exists=True, dir_okay=False),
    help="Fit JSON or truth sidecar (truth defaults to <study>.truth.json)",
)
@click.option("--alpha", "alphas", type=float, multiple=True, required=True, help="Allocation; repeatable")
@click.option("--spillover-arm", type=click.IntRange(0, 1), help="Arm for spillover contrasts")
@click.option("--quadrature-nodes", type=click.IntRange(min=1), help="Gauss-Hermite nodes")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Report JSON; a CSV is written beside it")
@click.pass_obj
@reports_errors
def estimate_cmd(
    run: RunContext,
    study_path: str,
    cps_source: str,
    cps_file: Optional[str],
    alphas: Tuple[float, ...],
    spillover_arm: Optional[int],
    quadrature_nodes: Optional[int],
    out: str,
):
    """IPW estimates of policy means, direct and spillover effects."""
    settings = run.settings
    nodes = quadrature_nodes or settings.quadrature.nodes
    arm = settings.estimands.spillover_arm if spillover_arm is None else spillover_arm
    if cps_file is None:
        if cps_source != "truth":
            raise click.UsageError(f"--cps-file is required for --cps-source {cps_source}")
        cps_file = str(truth_path(study_path))
    cps_path = Path(cps_file)
    out_path = Path(out)
    csv_path = out_path.with_suffix(".csv")
    manifest = RunManifest(
        "estimate",
        {"cps_source": cps_source, "alphas": list(alphas), "spillover_arm": arm, "quadrature_nodes": nodes},
        inputs=[study_path, str(cps_path)],
        outputs=[str(out_path), str(csv_path)],
    )

    study = load_study(study_path)
    if not cps_path.exists():
        raise StudyMismatchError(f"CPS file not found: {cps_path}")
    cps = load_cps(cps_source, cps_path, study, nodes)
    report = estimate(study, list(alphas), cps, spillover_arm=arm, n_jobs=run.threads)
    write_json({"cps_source": cps_source, **report.to_dict()}, out_path)
    report.save_csv(csv_path)
    manifest.finish().write(out_path)

    table = Table(title="Estimands")
    for column in ("estimand", "alpha", "alpha'", "value", "std. error"):
        table.add_column(column)
    nan = float("nan")
    for a in report.alphas:
        se = report.direct_effect_se.get(a, nan)
        table.add_row("DE", f"{a:g}", "", f"{report.direct_effect[a]:.6g}", f"{se:.3g}")
    for (a, b), value in report.spillover_effect.items():
        if a != b:
            se = report.spillover_effect_se.get((a, b), nan)
            table.add_row("SE", f"{a:g}", f"{b:g}", f"{value:.6g}", f"{se:.3g}")
    console.print(table)


@cli.command()
@click.argument("study_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--scores", "scores_file", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Out-of-fold scores CSV written by semiparam")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Balance table CSV")
@click.pass_obj
@reports_errors
def balance(run: RunContext, study_path: str, scores_file: str, out: str):
    """Standardized mean differences before and after inverse-propensity weighting."""
    manifest = RunManifest("balance", {}, inputs=[study_path, scores_file], outputs=[out])
    study = load_study(study_path)
    ehat = read_scores(scores_file, study)
    frame = covariate_balance(study, ehat)
    frame.to_csv(out, index=False, lineterminator="\n", float_format="%.17g")
    manifest.finish().write(out)

    table = Table(title="Covariate balance")
    table.add_column("covariate")
    table.add_column("raw SMD")
    table.add_column("weighted SMD")
    for row in frame.itertuples(index=False):
        table.add_row(row.covariate, f"{row.smd_raw:.4f}", f"{row.smd_weighted:.4f}")
    console.print(table)


if __name__ == "__main__":
    cli()
