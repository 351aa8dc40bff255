"""Command-line interface: calibrate / score / diagnose / fit-noise /
generate / validate / stability with deterministic report writing.

Every report embeds the resolved configuration echo, tool version, input
file hashes and seed, so a report is sufficient to reproduce its run.
Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from . import __version__
from .calibration import (
    CalibrationError,
    DisagreementSamples,
    bootstrap_calibration,
    estimate_tau_star,
    rank_metrics,
    sample_expected,
    sample_observed,
)
from .dataset import Dataset, DatasetError, dataset_to_dict, parse_dataset
from .diagnostics import (
    class_table,
    collaboration_matrix,
    localization_sensitivity,
    per_image_distribution,
    vitality_table,
)
from .distances import METRIC_NAMES
from .noise.extraction import extract_errors
from .noise.model import (
    fit_noise_model,
    load_noise_model,
    load_proposals,
    load_similarity,
    save_noise_model,
)
from .noise.generation import generate
from .pipeline import PipelineConfig, build_matrices, score_dataset
from .reporting import file_sha256, write_csv, write_report
from .validation import permutation_stability, run_suite

SOLVER_CHOICES = click.Choice(["greedy", "shm", "ahc"])
COST_CHOICES = click.Choice(["soft", "neg"])
METRIC_CHOICES = click.Choice(list(METRIC_NAMES))


class CliError(click.ClickException):
    exit_code = 1


def _jobs_default() -> int:
    try:
        return max(1, int(os.environ.get("KALOS_JOBS", "1")))
    except ValueError:
        return 1


def _load_dataset(path: str) -> Dataset:
    try:
        return parse_dataset(path)
    except DatasetError as exc:
        raise CliError(str(exc)) from exc


def _apply_config_file(ctx: click.Context, config_path: str | None, **values):
    """Merge a shared-configuration JSON file under explicit flags.

    Flags given on the command line win; everything else falls back to the
    file, then to the built-in defaults, so a report's config echo can be
    re-fed to reproduce its run.
    """
    if not config_path:
        return values
    try:
        doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config file {config_path}: {exc}") from exc
    merged = dict(values)
    for key in merged:
        source = ctx.get_parameter_source(_PARAM_NAME.get(key, key))
        from_cli = source == click.core.ParameterSource.COMMANDLINE
        if not from_cli and key in doc and doc[key] is not None:
            merged[key] = str(doc[key]) if key == "tau" else doc[key]
    return merged


_PARAM_NAME = {"dataset_path": "dataset_path"}


def _resolve_tau(tau: str, dataset: Dataset, metric: str, seed: int) -> float:
    if tau != "auto":
        try:
            value = float(tau)
        except ValueError:
            raise CliError(f"--tau must be a decimal in (0, 1] or 'auto', got {tau!r}") from None
        if not 0.0 < value <= 1.0:
            raise CliError(f"--tau must lie in (0, 1], got {value}")
        return value
    try:
        obs = sample_observed(dataset, metric)
        exp = sample_expected(dataset, metric, seed=seed)
        result = estimate_tau_star(DisagreementSamples(observed=obs, expected=exp, metric=metric))
    except CalibrationError as exc:
        raise CliError(f"--tau auto needs calibratable data: {exc}") from exc
    return result.tau_star


def _envelope(config: dict, inputs: dict[str, str], seed: int | None) -> dict:
    return {
        "tool": "kalos",
        "version": __version__,
        "config": config,
        "inputs": {name: {"path": str(path), "sha256": file_sha256(path)}
                   for name, path in inputs.items()},
        "seed": seed,
    }


@click.group()
@click.option("--jobs", type=int, default=_jobs_default, show_default="KALOS_JOBS or 1",
              help="Worker count for parallelizable stages.")
@click.pass_context
def cli(ctx: click.Context, jobs: int) -> None:
    """Inter-annotator agreement for instance-based vision annotations."""
    ctx.ensure_object(dict)
    ctx.obj["jobs"] = max(1, jobs)


@cli.command()
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--metrics", default="box_iou", help="Comma-separated metric names.")
@click.option("--pairing", type=click.Choice(["all_pairs", "best_match"]), default="all_pairs")
@click.option("--bootstrap", type=int, default=0, help="Bootstrap iterations (0 disables).")
@click.option("--seed", type=int, default=0)
@click.option("--stratify", type=click.Choice(["size"]), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
def calibrate(ctx, dataset_path, metrics, pairing, bootstrap, seed, stratify, out_path) -> None:
    """Rank distance metrics by KS separation and locate the anchor tau*."""
    jobs = ctx.obj.get("jobs", 1) if ctx.obj else 1
    dataset = _load_dataset(dataset_path)
    names = [m.strip() for m in metrics.split(",") if m.strip()]
    for name in names:
        if name not in METRIC_NAMES:
            raise CliError(f"unknown metric {name!r}; expected one of {METRIC_NAMES}")
    try:
        ranking = rank_metrics(dataset, names, mode=pairing, seed=seed)
        details = {}
        for name in names:
            obs = sample_observed(dataset, name, pairing)
            exp = sample_expected(dataset, name, pairing, seed=seed)
            details[name] = estimate_tau_star(
                DisagreementSamples(observed=obs, expected=exp, metric=name,
                                    pairing_mode=pairing, sample_seed=seed))
        tables = {}
        if bootstrap:
            for name in names:
                tables[name] = bootstrap_calibration(dataset, name, iterations=bootstrap,
                                                     seed=seed, stratify=stratify, mode=pairing,
                                                     jobs=jobs)
    except CalibrationError as exc:
        raise CliError(str(exc)) from exc

    out = Path(out_path)
    report = _envelope(
        {"metrics": names, "pairing": pairing, "bootstrap": bootstrap, "stratify": stratify},
        {"dataset": dataset_path}, seed)
    report["ranking"] = [r.to_dict() for r in ranking]
    report["calibration"] = {name: result.to_dict(include_grid=False)
                             for name, result in details.items()}
    report["bootstrap"] = {name: table.to_dict() for name, table in tables.items()} if bootstrap else None
    write_report(report, out)
    for name, result in details.items():
        write_csv(out.with_name(out.stem + f".density.{name}.csv"),
                  ["grid_point", "f_do", "f_de"],
                  zip(result.grid.tolist(), result.f_do.tolist(), result.f_de.tolist()))
    click.echo(f"wrote {out}")


def _score_options(fn):
    fn = click.option("--dataset", "dataset_path", required=True,
                      type=click.Path(exists=True, dir_okay=False))(fn)
    fn = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                      help="Shared configuration JSON; explicit flags override it.")(fn)
    fn = click.option("--metric", type=METRIC_CHOICES, default="box_iou")(fn)
    fn = click.option("--tau", default="0.5", help="Distance threshold in (0, 1] or 'auto'.")(fn)
    fn = click.option("--solver", type=SOLVER_CHOICES, default="greedy")(fn)
    fn = click.option("--cost", type=COST_CHOICES, default="soft")(fn)
    fn = click.option("--seed", type=int, default=0)(fn)
    return fn


@cli.command()
@_score_options
@click.option("--aggregation", type=click.Choice(["mean", "global", "both"]), default="both")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_context
def score(ctx, dataset_path, config_path, metric, tau, solver, cost, seed, aggregation,
          out_dir) -> None:
    """Score a dataset: mean and global alpha plus the per-image breakdown."""
    merged = _apply_config_file(ctx, config_path, metric=metric, tau=tau, solver=solver,
                                cost=cost, seed=seed, aggregation=aggregation)
    metric, tau, solver = merged["metric"], merged["tau"], merged["solver"]
    cost, seed, aggregation = merged["cost"], merged["seed"], merged["aggregation"]
    dataset = _load_dataset(dataset_path)
    tau_value = _resolve_tau(str(tau), dataset, metric, seed)
    cfg = PipelineConfig(metric=metric, tau=tau_value, solver=solver, cost=cost,
                         aggregation=aggregation)
    result = score_dataset(dataset, cfg)
    report = _envelope({"metric": metric, "tau": tau_value, "tau_requested": str(tau),
                        "solver": solver, "cost": cost, "aggregation": aggregation},
                       {"dataset": dataset_path}, seed)
    report["configuration"] = cfg.echo()
    body = result.to_dict()
    if aggregation == "mean":
        body.pop("global_alpha", None)
        body.pop("global_band", None)
    elif aggregation == "global":
        body.pop("mean_alpha", None)
        body.pop("mean_band", None)
    report["results"] = body
    write_report(report, Path(out_dir) / "score.json")
    click.echo(f"wrote {Path(out_dir) / 'score.json'}")


@cli.command()
@_score_options
@click.option("--analyses", default="lsa,class,vitality,collab,dist",
              help="Comma list from lsa,class,vitality,collab,dist.")
@click.option("--tau-s-list", "tau_s_list", default="0.1,0.3,0.5,0.7,0.9",
              help="Similarity thresholds for the LSA curve.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_context
def diagnose(ctx, dataset_path, config_path, metric, tau, solver, cost, seed, analyses,
             tau_s_list, out_dir) -> None:
    """Run the downstream diagnostics toolkit."""
    merged = _apply_config_file(ctx, config_path, metric=metric, tau=tau, solver=solver,
                                cost=cost, seed=seed)
    metric, tau, solver = merged["metric"], merged["tau"], merged["solver"]
    cost, seed = merged["cost"], merged["seed"]
    dataset = _load_dataset(dataset_path)
    tau_value = _resolve_tau(str(tau), dataset, metric, seed)
    cfg = PipelineConfig(metric=metric, tau=tau_value, solver=solver, cost=cost)
    wanted = {a.strip() for a in analyses.split(",") if a.strip()}
    unknown = wanted - {"lsa", "class", "vitality", "collab", "dist"}
    if unknown:
        raise CliError(f"unknown analyses: {sorted(unknown)}")
    out = Path(out_dir)
    envelope = _envelope({"metric": metric, "tau": tau_value, "solver": solver,
                          "cost": cost, "analyses": sorted(wanted)},
                         {"dataset": dataset_path}, seed)
    envelope["configuration"] = cfg.echo()
    matrices = build_matrices(dataset, cfg)

    if "lsa" in wanted:
        taus = [float(t) for t in tau_s_list.split(",") if t.strip()]
        curve = localization_sensitivity(dataset, cfg, taus)
        write_report({**envelope, "lsa": curve.to_dict()}, out / "lsa.json")
        write_csv(out / "lsa.csv", ["tau_s", "mean_alpha"],
                  [(t, a) for t, a in curve.points])
    if "class" in wanted:
        rows = class_table(matrices, [c.id for c in dataset.categories])
        write_report({**envelope, "classes": rows}, out / "class_difficulty.json")
        write_csv(out / "class_difficulty.csv", ["category", "alpha", "support"],
                  [(r["category"], r["alpha"], r["support"]) for r in rows])
    if "vitality" in wanted:
        rows = vitality_table(dataset, cfg)
        write_report({**envelope, "vitality": rows}, out / "vitality.json")
        write_csv(out / "vitality.csv", ["rater_id", "vitality"],
                  [(r["rater_id"], r["vitality"]) for r in rows])
    if "collab" in wanted:
        table = collaboration_matrix(dataset, cfg)
        rows = [{"rater_a": a, "rater_b": b, "alpha": v} for (a, b), v in sorted(table.items())]
        write_report({**envelope, "collaboration": rows}, out / "collaboration.json")
        write_csv(out / "collaboration.csv", ["rater_a", "rater_b", "alpha"],
                  [(r["rater_a"], r["rater_b"], r["alpha"]) for r in rows])
    if "dist" in wanted:
        summary = per_image_distribution(matrices)
        write_report({**envelope, "distribution": summary.to_dict()}, out / "distribution.json")
        write_csv(out / "distribution.csv", ["alpha"], [(v,) for v in summary.values])
    click.echo(f"wrote diagnostics to {out}")


@cli.command("fit-noise")
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--similarity", "similarity_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--proposals", "proposals_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--sweep", default="0.5", help="Comma list of IoU thresholds for the sweep table.")
@click.option("--out", "out_path", required=True, type=click.Path())
def fit_noise(dataset_path, similarity_path, proposals_path, sweep, out_path) -> None:
    """Extract the error corpus and fit the noise model."""
    dataset = _load_dataset(dataset_path)
    thresholds = tuple(float(t) for t in sweep.split(",") if t.strip())
    similarity = load_similarity(similarity_path) if similarity_path else None
    proposals = load_proposals(proposals_path) if proposals_path else None
    corpus, sweep_rows = extract_errors(dataset, thresholds)
    model = fit_noise_model(corpus, similarity=similarity, proposals=proposals,
                            categories=[c.id for c in dataset.categories])
    inputs = {"dataset": dataset_path}
    if similarity_path:
        inputs["similarity"] = similarity_path
    if proposals_path:
        inputs["proposals"] = proposals_path
    model.provenance.update({name: file_sha256(path) for name, path in inputs.items()})
    model.provenance["sweep"] = [r.to_dict() for r in sweep_rows]
    save_noise_model(model, out_path)
    if model.fallbacks:
        click.echo("fallbacks: " + ", ".join(model.fallbacks), err=True)
    click.echo(f"wrote {out_path}")


@cli.command("generate")
@click.option("--reference", "reference_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--lambda", "lam", type=float, default=1.0, show_default=True)
@click.option("--raters", type=int, default=3, show_default=True)
@click.option("--source-rater", default=None, help="Restrict the reference to one rater's view.")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", required=True, type=click.Path())
def generate_cmd(reference_path, model_path, lam, raters, source_rater, seed, out_path) -> None:
    """Synthesize noisy raters; writes the dataset plus a correspondence sidecar."""
    reference = _load_dataset(reference_path)
    model = load_noise_model(model_path)
    if lam < 0:
        raise CliError(f"--lambda must be non-negative, got {lam}")
    result = generate(reference, model, lam, raters, seed=seed, source_rater=source_rater)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(dataset_to_dict(result.dataset), out)
    sidecar = _envelope({"lambda": lam, "raters": raters, "source_rater": source_rater},
                        {"reference": reference_path, "model": model_path}, seed)
    sidecar["correspondence"] = {k: list(v) for k, v in sorted(result.correspondence.items())}
    sidecar["signal_loss"] = result.signal_loss
    sidecar["theoretical_events"] = result.theoretical_events
    sidecar["cannibalized"] = result.cannibalized
    sidecar["fp_skipped"] = result.fp_skipped
    sidecar["events"] = result.events
    write_report(sidecar, out.with_suffix(".correspondence.json"))
    click.echo(f"wrote {out} (+ correspondence sidecar)")


@cli.command("validate")
@click.option("--reference", "reference_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--lambdas", default="0.25,0.5,1,2,5")
@click.option("--raters", default="3", help="Comma list or a..b range of rater counts.")
@click.option("--solvers", default="greedy,shm,ahc")
@click.option("--costs", default="soft,neg")
@click.option("--cluster-sizes", "cluster_sizes", default="",
              help="Comma list of A-B collaboration group sizes, e.g. 5-1,3-3.")
@click.option("--metric", type=METRIC_CHOICES, default="box_iou")
@click.option("--tau", type=float, default=0.5)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_context
def validate_cmd(ctx, reference_path, model_path, lambdas, raters, solvers, costs, cluster_sizes,
                 metric, tau, seed, out_dir) -> None:
    """Run the property-experiment suite on generator output."""
    jobs = ctx.obj.get("jobs", 1) if ctx.obj else 1
    reference = _load_dataset(reference_path)
    model = load_noise_model(model_path)
    lam_list = [float(v) for v in lambdas.split(",") if v.strip()]
    rater_list = _parse_counts(raters)
    solver_list = [s.strip() for s in solvers.split(",") if s.strip()]
    cost_list = [c.strip() for c in costs.split(",") if c.strip()]
    clusters = []
    for token in cluster_sizes.split(","):
        token = token.strip()
        if token:
            a, b = token.split("-")
            clusters.append((int(a), int(b)))
    base = PipelineConfig(metric=metric, tau=tau)
    report = run_suite(reference, model, lam_list, rater_list, solver_list, cost_list,
                       seed=seed, base=base, cluster_sizes=clusters or None)
    out = Path(out_dir)
    envelope = _envelope(report.config, {"reference": reference_path, "model": model_path}, seed)
    envelope["report"] = report.to_dict()
    write_report(envelope, out / "report.json")
    rows = [r.to_dict() for r in report.rows]
    write_csv(out / "fig3_ri.csv",
              ["solver", "cost", "lambda", "raters", "seed", "filtered_rand_index"],
              [(r["solver"], r["cost"], r["lambda"], r["raters"], r["seed"],
                r["filtered_rand_index"]) for r in rows])
    write_csv(out / "fig4_f1.csv",
              ["solver", "cost", "lambda", "raters", "seed", "precision", "recall", "f1"],
              [(r["solver"], r["cost"], r["lambda"], r["raters"], r["seed"],
                r["precision"], r["recall"], r["f1"]) for r in rows])
    write_csv(out / "fig5_outcomes.csv",
              ["solver", "cost", "lambda", "raters", "seed", "tp", "fp", "missed", "cuckoo"],
              [(r["solver"], r["cost"], r["lambda"], r["raters"], r["seed"],
                r["tp"], r["fp"], r["missed"], r["cuckoo"]) for r in rows])
    write_csv(out / "fig6_roi.csv",
              ["raters", "lambda", "solver", "cost", "seed", "mean_alpha"],
              [(r["raters"], r["lambda"], r["solver"], r["cost"], r["seed"],
                r["mean_alpha"]) for r in rows])
    write_csv(out / "fig7_clusters.csv",
              ["group_a", "group_b", "lambda", "seed", "mean_alpha"],
              [(r.group_a, r.group_b, r.lam, r.seed, r.mean_alpha)
               for r in report.cluster_rows])
    click.echo(f"wrote validation report to {out}")


@cli.command()
@_score_options
@click.option("--perms", type=int, default=20, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_context
def stability(ctx, dataset_path, config_path, metric, tau, solver, cost, seed, perms,
              out_dir) -> None:
    """Permutation-stability check: ARI across permuted input orders."""
    merged = _apply_config_file(ctx, config_path, metric=metric, tau=tau, solver=solver,
                                cost=cost, seed=seed)
    metric, tau, solver = merged["metric"], merged["tau"], merged["solver"]
    cost, seed = merged["cost"], merged["seed"]
    dataset = _load_dataset(dataset_path)
    tau_value = _resolve_tau(str(tau), dataset, metric, seed)
    cfg = PipelineConfig(metric=metric, tau=tau_value, solver=solver, cost=cost)
    result = permutation_stability(dataset, cfg, n_perms=perms, seed=seed,
                                   jobs=ctx.obj.get("jobs", 1) if ctx.obj else 1)
    report = _envelope({"metric": metric, "tau": tau_value, "solver": solver,
                        "cost": cost, "perms": perms}, {"dataset": dataset_path}, seed)
    report["configuration"] = cfg.echo()
    report["stability"] = result
    write_report(report, Path(out_dir) / "stability.json")
    click.echo(f"wrote {Path(out_dir) / 'stability.json'}")


def _parse_counts(spec: str) -> list[int]:
    out: list[int] = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        if ".." in token:
            lo, hi = token.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(token))
    if not out:
        raise CliError(f"could not parse rater counts from {spec!r}")
    return out


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 1
        return code
    except Exception as exc:  # runtime failure
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
