"""Command-line entry points: simulate cohorts, run the selection pipeline,
and reproduce the synthetic benchmark grid.

Every run writes its fully resolved configuration next to its outputs;
re-running from that file reproduces the numeric outputs byte for byte.
Exit codes: 0 success, 2 configuration/usage error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import functools
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import data as dataprep
from . import report, simulate
from .attribution import AttributionScores, IgConfig, scores_to_csv
from .errors import ConfigError, DataError, GenesigError, NumericError
from .model import TrainConfig
from .selection import RgeConfig, records_from_trace, repeat_and_summarize

ENV_OUT_ROOT = "GENESIG_OUT"

# benchmark grid in the published row order: sample count major, then
# dispersion, then DE fraction
BENCHMARK_GRID = [(phi, n, de)
                  for n in (50, 200, 500)
                  for phi in (1.0, 100.0)
                  for de in (0.30, 0.05)]


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except DataError as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(3)
        except NumericError as exc:
            click.echo(f"numeric error: {exc}", err=True)
            sys.exit(4)
    return wrapper


def _resolve_out_dir(out, command, force):
    if out is None:
        root = Path(os.environ.get(ENV_OUT_ROOT, "runs"))
        out = root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; "
                          "pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


@click.group()
def main():
    """Gene signature selection with a graph convolutional classifier."""


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

@main.command("simulate")
@click.option("--samples", type=int, default=200, show_default=True)
@click.option("--genes", type=int, default=1000, show_default=True)
@click.option("--de", type=float, required=True,
              help="Fraction of genes made differentially expressed.")
@click.option("--phi", type=float, required=True,
              help="Dispersion; variance is mu + mu^2/phi.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--balance", type=float, default=0.5, show_default=True,
              help="Fraction of samples assigned class 1.")
@click.option("--out", type=click.Path(), default=None,
              help="Output directory (default: $GENESIG_OUT or ./runs, timestamped).")
@click.option("--force", is_flag=True, help="Allow writing into a non-empty directory.")
@_exit_codes
def simulate_cmd(samples, genes, de, phi, seed, balance, out, force):
    """Generate a synthetic cohort as counts.csv plus manifest.json."""
    spec = simulate.CohortSpec(n_samples=samples, n_genes=genes,
                               de_fraction=de, phi=phi, seed=seed,
                               class_balance=balance)
    dataset = simulate.generate(spec)
    out = _resolve_out_dir(out, "simulate", force)
    dataprep.save_csv(dataset, out / "counts.csv")
    dataprep.save_json(simulate.manifest(spec, dataset), out / "manifest.json")
    click.echo(f"wrote {out / 'counts.csv'} "
               f"({samples} samples x {genes} genes, "
               f"{int(dataset.gt_deg.sum())} DE genes)")


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

RUN_DEFAULTS = {
    "label_column": "label", "labels_path": None, "stage": "raw-counts",
    "skip_normalize": False, "skip_vst": False, "skip_nzv": False,
    "variance_floor": 1e-8, "test_fraction": 0.2, "val_fraction": 0.25,
    "stratify": True, "split_seed": 0, "seed": 0, "repeats": 1,
    "elimination_rate": 0.10, "min_gene_fraction": 0.05, "epochs": 200,
    "learning_rate": 0.01, "weight_decay": 1e-3, "dropout": 0.4, "tau": 0.7,
    "ig_steps": 50, "classifier": "gcn", "conv_head": False,
    "evaluate_gt": False, "figures": True,
}


@main.command()
@click.argument("dataset_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="JSON file of defaults; flags override it.")
@click.option("--label-column", default=None)
@click.option("--labels-path", type=click.Path(exists=True), default=None)
@click.option("--stage", type=click.Choice(["raw-counts", "transformed"]),
              default=None, help="Input stage; 'transformed' skips normalize+VST.")
@click.option("--skip-normalize", is_flag=True, default=None)
@click.option("--skip-vst", is_flag=True, default=None)
@click.option("--skip-nzv", is_flag=True, default=None)
@click.option("--variance-floor", type=float, default=None)
@click.option("--test-fraction", type=float, default=None)
@click.option("--val-fraction", type=float, default=None)
@click.option("--no-stratify", "stratify", flag_value=False, default=None)
@click.option("--split-seed", type=int, default=None)
@click.option("--seed", type=int, default=None, help="Pipeline seed (training streams).")
@click.option("--repeats", type=int, default=None)
@click.option("--elimination-rate", type=float, default=None)
@click.option("--min-gene-fraction", type=float, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--weight-decay", type=float, default=None)
@click.option("--dropout", type=float, default=None)
@click.option("--tau", type=float, default=None)
@click.option("--ig-steps", type=int, default=None)
@click.option("--classifier", type=click.Choice(["gcn", "mlp"]), default=None)
@click.option("--conv-head", is_flag=True, default=None,
              help="Use a fourth graph convolution instead of the affine head.")
@click.option("--evaluate-gt", is_flag=True, default=None,
              help="Also score the ground-truth DE subset (synthetic data).")
@click.option("--no-figures", "figures", flag_value=False, default=None)
@click.option("--resume", "resume_path", type=click.Path(exists=True),
              default=None, help="Continue from a persisted trace.json "
              "(requires repeats=1); the result is identical to an "
              "uninterrupted run.")
@click.option("--out", type=click.Path(), default=None)
@click.option("--force", is_flag=True)
@_exit_codes
def run(dataset_path, config_path, resume_path, out, force, **flags):
    """Select a gene signature from DATASET_PATH and report test metrics."""
    cfg = dict(RUN_DEFAULTS)
    if config_path:
        file_cfg = dataprep.load_json(config_path)
        unknown = set(file_cfg) - set(cfg) - {"dataset_path"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update({k: v for k, v in file_cfg.items() if k != "dataset_path"})
    cfg.update({k: v for k, v in flags.items() if v is not None})

    out = _resolve_out_dir(out, "run", force)
    resolved = dict(cfg, dataset_path=str(dataset_path))
    dataprep.save_json(resolved, out / "run_config.json")

    resume_trace = dataprep.load_json(resume_path) if resume_path else None
    dataset, plan, summary, traces, preprocess = _run_pipeline(
        dataset_path, cfg, resume_trace=resume_trace)
    dataprep.save_json(preprocess, out / "preprocess.json")

    dataprep.save_json(dataprep.splits_to_json(plan), out / "splits.json")
    dataprep.save_json(report.trace_to_dict(traces[0], dataset.gene_names),
                       out / "trace.json")
    if len(traces) > 1:
        trace_dir = out / "traces"
        trace_dir.mkdir(exist_ok=True)
        for r, trace in enumerate(traces):
            dataprep.save_json(report.trace_to_dict(trace, dataset.gene_names),
                               trace_dir / f"trace_{cfg['seed'] + r}.json")

    extra = []
    if "gt_subset_accuracy" in summary:
        extra.append(("ground_truth", {
            "n_genes": int(dataset.gt_deg.sum()),
            "n_true_degs": int(dataset.gt_deg.sum()),
            "accuracy": summary["gt_subset_accuracy"],
            "macro_f1": summary["gt_subset_macro_f1"]}))
    rows = report.summary_rows(Path(dataset_path).stem, cfg["classifier"],
                               summary, extra)
    report.write_summary_csv(rows, out / "summary.csv")
    report.write_summary_table(rows, out / "summary.txt")
    best = traces[0].iterations[traces[0].best_iteration]
    scores_to_csv(
        AttributionScores(scores=best.importance,
                          gene_names=[dataset.gene_names[i]
                                      for i in best.gene_idx]),
        out / "importance.csv")
    if cfg["figures"]:
        report.render_figures(out / "figures", traces[0], dataset.gene_names)

    acc = summary["test_accuracy"]
    click.echo(f"selected {int(summary['n_selected']['mean'])} genes; "
               f"test accuracy {report.format_mean_std(acc['mean'], acc['std'])}")
    click.echo(f"outputs in {out}")


def _run_pipeline(dataset_path, cfg, resume_trace=None):
    """Shared load -> preprocess -> split -> select machinery."""
    dataset = dataprep.load_csv(dataset_path, label_column=cfg["label_column"],
                                labels_path=cfg["labels_path"],
                                stage=cfg["stage"])
    manifest_path = Path(dataset_path).with_name("manifest.json")
    if dataset.gt_deg is None and manifest_path.exists():
        manifest = dataprep.load_json(manifest_path)
        if "gt_deg_genes" in manifest:
            gt_names = set(manifest["gt_deg_genes"])
            dataset.gt_deg = np.array([g in gt_names for g in dataset.gene_names])

    plan = dataprep.make_splits(dataset.labels, dataprep.SplitPlan(
        test_fraction=cfg["test_fraction"],
        inner_val_fraction=cfg["val_fraction"],
        stratified=cfg["stratify"], seed=cfg["split_seed"]))

    preprocess = {"stage_in": dataset.stage}
    if dataset.stage == "raw-counts" and not cfg["skip_normalize"]:
        normalized, size_factors = dataprep.median_ratio_normalize(
            dataset.values, fit_rows=plan.trainval_idx)
        dataset.values = normalized
        dataset.stage = "normalized"
        preprocess["size_factors"] = size_factors.tolist()
    if dataset.stage != "transformed" and not cfg["skip_vst"]:
        dataset.values = dataprep.vst(dataset.values)
        dataset.stage = "transformed"
    dataset.stage = "transformed"
    if not cfg["skip_nzv"]:
        dataset, kept = dataprep.nzv_filter(dataset, cfg["variance_floor"],
                                            fit_rows=plan.trainval_idx)
        preprocess["kept_gene_idx"] = kept.tolist()
    preprocess["n_genes"] = dataset.n_genes

    rge_cfg = RgeConfig(elimination_rate=cfg["elimination_rate"],
                        min_gene_fraction=cfg["min_gene_fraction"],
                        seed=cfg["seed"], repeats=cfg["repeats"])
    train_cfg = TrainConfig(epochs=cfg["epochs"],
                            learning_rate=cfg["learning_rate"],
                            weight_decay=cfg["weight_decay"],
                            dropout=cfg["dropout"], seed=cfg["seed"])
    resume_records = None
    if resume_trace is not None:
        resume_records = records_from_trace(resume_trace, dataset.gene_names)
    summary, traces = repeat_and_summarize(
        dataset, plan, rge_cfg, train_cfg, IgConfig(steps=cfg["ig_steps"]),
        classifier=cfg["classifier"], tau=cfg["tau"],
        conv_head=cfg["conv_head"],
        evaluate_gt=cfg["evaluate_gt"] and dataset.gt_deg is not None,
        resume_records=resume_records)
    return dataset, plan, summary, traces, preprocess


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@main.command()
@click.option("--rows", default=None,
              help="Comma-separated subset of grid rows 1-12 (default: all).")
@click.option("--repeats", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--genes", type=int, default=1000, show_default=True)
@click.option("--epochs", type=int, default=200, show_default=True)
@click.option("--classifier", type=click.Choice(["gcn", "mlp"]), default="gcn",
              show_default=True)
@click.option("--out", type=click.Path(), default=None)
@click.option("--force", is_flag=True)
@_exit_codes
def benchmark(rows, repeats, seed, genes, epochs, classifier, out, force):
    """Run the 12-cohort synthetic grid and emit a mean +/- std table."""
    if rows is None:
        selected = list(range(1, len(BENCHMARK_GRID) + 1))
    else:
        try:
            selected = sorted({int(r) for r in rows.split(",")})
        except ValueError:
            raise ConfigError(f"--rows must be integers, got {rows!r}") from None
        bad = [r for r in selected if not 1 <= r <= len(BENCHMARK_GRID)]
        if bad:
            raise ConfigError(f"--rows out of range 1-{len(BENCHMARK_GRID)}: {bad}")

    out = _resolve_out_dir(out, "benchmark", force)
    dataprep.save_json({"rows": selected, "repeats": repeats, "seed": seed,
                        "genes": genes, "epochs": epochs,
                        "classifier": classifier}, out / "benchmark_config.json")
    all_rows = []
    for row_no in selected:
        phi, n, de = BENCHMARK_GRID[row_no - 1]
        name = f"row{row_no:02d}_phi{phi:g}_n{n}_de{de:g}"
        click.echo(f"[{name}] generating and running {repeats} repeat(s)...")
        try:
            all_rows.extend(_benchmark_row(row_no, phi, n, de, repeats, seed,
                                           genes, epochs, classifier))
        except GenesigError as exc:
            click.echo(f"[{name}] FAILED: {exc}", err=True)
            all_rows.append({"dataset": name, "classifier": classifier,
                             "gene_set": "failed", "n_genes": "",
                             "n_true_degs": "", "accuracy_mean": float("nan"),
                             "accuracy_std": float("nan"),
                             "macro_f1_mean": float("nan"),
                             "macro_f1_std": float("nan")})
    report.write_summary_csv(all_rows, out / "benchmark_summary.csv")
    report.write_summary_table(all_rows, out / "benchmark_summary.txt")
    report.render_benchmark_figure(all_rows, out / "benchmark_accuracy.png")
    click.echo(f"outputs in {out}")


def _benchmark_row(row_no, phi, n, de, repeats, seed, genes, epochs, classifier):
    spec = simulate.CohortSpec(n_samples=n, n_genes=genes, de_fraction=de,
                               phi=phi, seed=seed + row_no)
    dataset = simulate.generate(spec)
    plan = dataprep.make_splits(dataset.labels, dataprep.SplitPlan(seed=seed))
    normalized, _ = dataprep.median_ratio_normalize(dataset.values,
                                                    fit_rows=plan.trainval_idx)
    dataset.values = dataprep.vst(normalized)
    dataset.stage = "transformed"
    dataset, _ = dataprep.nzv_filter(dataset, fit_rows=plan.trainval_idx)

    summary, _ = repeat_and_summarize(
        dataset, plan,
        RgeConfig(seed=seed, repeats=repeats),
        TrainConfig(epochs=epochs, seed=seed),
        classifier=classifier, evaluate_gt=True)
    name = f"row{row_no:02d}_phi{phi:g}_n{n}_de{de:g}"
    extra = [("ground_truth", {
        "n_genes": int(dataset.gt_deg.sum()),
        "n_true_degs": int(dataset.gt_deg.sum()),
        "accuracy": summary["gt_subset_accuracy"],
        "macro_f1": summary["gt_subset_macro_f1"]})]
    return report.summary_rows(name, classifier, summary, extra)


if __name__ == "__main__":
    main()
