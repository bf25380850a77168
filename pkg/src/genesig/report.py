"""Classification metrics, DEG-recovery statistics, and result emission.

Results are written in three forms: a JSON trace that round-trips exactly,
a flat CSV summary (one row per dataset/classifier/gene-set combination),
and a text table in mean +/- std layout. The report path also renders a
small set of matplotlib figures (importance ranking, elimination trajectory,
training loss) next to the delimited output.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

SUMMARY_COLUMNS = ["dataset", "classifier", "gene_set", "n_genes",
                   "n_true_degs", "accuracy_mean", "accuracy_std",
                   "macro_f1_mean", "macro_f1_std"]


@dataclass
class MetricBundle:
    accuracy: float
    precision: list
    recall: list
    f1: list
    macro_f1: float
    confusion: np.ndarray
    n_samples: int

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "precision": list(self.precision),
            "recall": list(self.recall),
            "f1": list(self.f1),
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.tolist(),
            "n_samples": self.n_samples,
        }


def compute_metrics(predictions, labels, n_classes=None):
    """Accuracy, per-class precision/recall/F1 (0/0 -> 0), macro-F1, confusion.

    Confusion rows are true classes, columns predicted, so row sums equal the
    class supports.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0 or predictions.shape != labels.shape:
        raise ConfigError("metrics need equal-length nonempty vectors")
    k = n_classes or int(max(predictions.max(), labels.max())) + 1
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)

    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    precision = _safe_ratio(tp, predicted)
    recall = _safe_ratio(tp, support)
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    return MetricBundle(
        accuracy=float(tp.sum() / labels.size),
        precision=precision.tolist(), recall=recall.tolist(), f1=f1.tolist(),
        macro_f1=float(f1.mean()), confusion=confusion,
        n_samples=int(labels.size))


def _safe_ratio(num, den):
    out = np.zeros_like(np.asarray(num, dtype=np.float64))
    nz = np.asarray(den) != 0
    out[nz] = np.asarray(num, dtype=np.float64)[nz] / np.asarray(den)[nz]
    return out


def deg_recovery(selected_idx, gt_deg):
    """Set-intersection statistics of a selection against the DE ground truth."""
    if gt_deg is None:
        raise DataError("deg_recovery needs ground-truth DE flags")
    gt_deg = np.asarray(gt_deg, dtype=bool)
    selected_idx = np.asarray(selected_idx)
    n_true = int(gt_deg[selected_idx].sum())
    n_selected = int(selected_idx.size)
    n_gt = int(gt_deg.sum())
    return {
        "n_selected": n_selected,
        "n_true": n_true,
        "precision": n_true / n_selected if n_selected else 0.0,
        "recall": n_true / n_gt if n_gt else 0.0,
    }


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

def trace_to_dict(trace, gene_names):
    """JSON-ready trace; contains no wall-clock state, so identical runs
    serialize byte-identically."""
    return {
        "schema_version": 1,
        "schedule": list(trace.schedule),
        "iterations": [
            {
                "iteration": rec.iteration,
                "n_genes": int(rec.n_genes),
                "gene_names": [gene_names[i] for i in rec.gene_idx],
                "val_accuracy": rec.val_accuracy,
                "val_macro_f1": rec.val_macro_f1,
                "importance": rec.importance.tolist(),
                "final_train_loss": rec.final_train_loss,
                "failed": rec.failed,
            }
            for rec in trace.iterations
        ],
        "best_iteration": trace.best_iteration,
        "selected_genes": list(trace.selected_genes),
        "final_test": trace.final_test,
        "final_loss_curve": list(trace.final_loss_curve),
    }


def format_mean_std(mean, std):
    return f"{mean:.3f} ± {std:.3f}"


def summary_rows(dataset_name, classifier, summary, extra_sets=()):
    """Flatten one run summary into CSV rows (one per gene set evaluated)."""
    rows = [{
        "dataset": dataset_name,
        "classifier": classifier,
        "gene_set": "selected",
        "n_genes": summary["n_selected"]["mean"],
        "n_true_degs": summary.get("n_true_degs", {}).get("mean", ""),
        "accuracy_mean": summary["test_accuracy"]["mean"],
        "accuracy_std": summary["test_accuracy"]["std"],
        "macro_f1_mean": summary["test_macro_f1"]["mean"],
        "macro_f1_std": summary["test_macro_f1"]["std"],
    }]
    for name, stats in extra_sets:
        rows.append({
            "dataset": dataset_name,
            "classifier": classifier,
            "gene_set": name,
            "n_genes": stats.get("n_genes", ""),
            "n_true_degs": stats.get("n_true_degs", ""),
            "accuracy_mean": stats["accuracy"]["mean"],
            "accuracy_std": stats["accuracy"]["std"],
            "macro_f1_mean": stats["macro_f1"]["mean"],
            "macro_f1_std": stats["macro_f1"]["std"],
        })
    return rows


def write_summary_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_summary_table(rows, path):
    """Text table mirroring the mean +/- std layout of the CSV summary."""
    headers = ["dataset", "classifier", "gene_set", "n_genes", "n_true_degs",
               "accuracy", "macro_f1"]
    lines = []
    table = []
    for row in rows:
        table.append([
            str(row["dataset"]), str(row["classifier"]), str(row["gene_set"]),
            _fmt_num(row["n_genes"]), _fmt_num(row["n_true_degs"]),
            format_mean_std(row["accuracy_mean"], row["accuracy_std"]),
            format_mean_std(row["macro_f1_mean"], row["macro_f1_std"]),
        ])
    widths = [max(len(h), *(len(r[i]) for r in table)) if table else len(h)
              for i, h in enumerate(headers)]
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for r in table:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt_num(value):
    if value == "" or value is None:
        return "-"
    value = float(value)
    return str(int(value)) if value == int(value) else f"{value:.1f}"


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def render_figures(out_dir, trace, gene_names, top=30):
    """Render the standard report figures as PNGs under ``out_dir``.

    Returns the list of written paths. Uses the Agg backend so it works
    headless.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    best = trace.iterations[trace.best_iteration]
    order = np.argsort(best.importance)[::-1][:top]
    scores = best.importance[order]
    norm = scores / scores.max() if scores.max() > 0 else scores
    names = [gene_names[best.gene_idx[i]] for i in order]
    fig, ax = plt.subplots(figsize=(8, max(3, 0.28 * len(names))))
    ax.barh(range(len(names))[::-1], norm, color="#4878a8")
    ax.set_yticks(range(len(names))[::-1])
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xlabel("normalized importance")
    ax.set_title(f"top {len(names)} genes of the selected subset")
    fig.tight_layout()
    path = out_dir / "importance_top.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    counts = [rec.n_genes for rec in trace.iterations]
    accs = [rec.val_accuracy for rec in trace.iterations]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(counts, accs, marker="o", ms=3)
    ax.axvline(trace.iterations[trace.best_iteration].n_genes,
               color="firebrick", ls="--", lw=1, label="selected")
    ax.set_xscale("log")
    ax.invert_xaxis()
    ax.set_xlabel("genes remaining")
    ax.set_ylabel("validation accuracy")
    ax.set_title("elimination trajectory")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "elimination_trajectory.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    if trace.final_loss_curve:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(trace.final_loss_curve)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        ax.set_title("final retrain loss")
        fig.tight_layout()
        path = out_dir / "final_training_loss.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written


def render_benchmark_figure(rows, path):
    """Grouped accuracy bars with std whiskers, one group per dataset row."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_dataset = {}
    for row in rows:
        if row["gene_set"] == "failed":
            continue
        by_dataset.setdefault(row["dataset"], {})[row["gene_set"]] = row
    if not by_dataset:
        return None
    datasets = list(by_dataset)
    sets = sorted({s for groups in by_dataset.values() for s in groups})
    width = 0.8 / len(sets)
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(datasets)), 4))
    x = np.arange(len(datasets))
    for i, gene_set in enumerate(sets):
        means = [by_dataset[d].get(gene_set, {}).get("accuracy_mean", np.nan)
                 for d in datasets]
        stds = [by_dataset[d].get(gene_set, {}).get("accuracy_std", 0.0)
                for d in datasets]
        ax.bar(x + (i - (len(sets) - 1) / 2) * width, means, width,
               yerr=stds, capsize=2, label=gene_set)
    ax.set_xticks(x)
    ax.set_xticklabels(datasets, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
