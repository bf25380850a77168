"""Recursive gene elimination driven by attribution scores.

Each iteration standardizes the surviving genes on the training rows, builds
the sample graph over the train+validation nodes, trains a fresh classifier,
records validation metrics, scores genes by aggregated integrated gradients
over the training nodes, and drops the lowest-scoring genes down to the next
count in the elimination schedule. The subset with the best validation
accuracy (ties going to the smaller subset) is retrained once on the full
train+validation side and scored on the held-out test nodes.

The schedule tracks a float gene budget multiplied by (1 - rate) each
iteration and materializes counts by rounding half-up; keeping the budget in
float avoids the compounding truncation bias of rounding the integer count
at every step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import report
from .attribution import IgConfig, aggregate_importance
from .data import Standardizer, resplit_inner
from .errors import ConfigError, DataError, NumericError
from .graph import build_graph, set_masks
from .model import fit, identity_operator, predict

FINAL_STREAM = 2 ** 31  # entropy tag for the final retrain, distinct from iterations


@dataclass
class RgeConfig:
    elimination_rate: float = 0.10
    min_gene_fraction: float = 0.05
    seed: int = 0
    repeats: int = 5

    def validate(self):
        if not 0 < self.elimination_rate < 1:
            raise ConfigError("elimination_rate must lie in (0,1)")
        if not 0 < self.min_gene_fraction < 1:
            raise ConfigError("min_gene_fraction must lie in (0,1)")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")


@dataclass
class IterationRecord:
    iteration: int
    gene_idx: np.ndarray
    val_accuracy: float
    val_macro_f1: float
    importance: np.ndarray
    final_train_loss: float
    failed: bool = False

    @property
    def n_genes(self):
        return self.gene_idx.size


@dataclass
class RgeTrace:
    iterations: list
    best_iteration: int
    selected_idx: np.ndarray
    selected_genes: list
    final_test: dict
    schedule: list
    final_loss_curve: list = field(default_factory=list)

    @property
    def gene_counts(self):
        return [rec.n_genes for rec in self.iterations]


def gene_count_schedule(n_genes, rate, min_genes):
    """Materialized per-iteration gene counts, strictly decreasing.

    Degenerate rates that would not shrink the count still make progress by
    one gene, so the loop is bounded by the starting count.
    """
    if min_genes < 1:
        raise ConfigError("min_genes must be >= 1")
    counts = [int(n_genes)]
    budget = float(n_genes)
    while True:
        budget *= 1.0 - rate
        nxt = min(math.floor(budget + 0.5), counts[-1] - 1)
        if nxt < min_genes:
            break
        counts.append(nxt)
    return counts


def min_gene_floor(n_genes, fraction):
    return math.ceil(fraction * n_genes)


def _local_positions(universe, members):
    pos = {int(g): i for i, g in enumerate(universe)}
    return np.array([pos[int(m)] for m in members])


def _operator_for(features, classifier, tau):
    if classifier == "mlp":
        return identity_operator(features.shape[0]), None
    graph = build_graph(features, tau=tau)
    return graph.norm_operator, graph


def run_rge(dataset, plan, rge_config, train_config, ig_config=None,
            classifier="gcn", tau=0.7, conv_head=False, resume_records=None):
    """Full elimination loop on a preprocessed dataset with materialized splits.

    ``resume_records`` may hold IterationRecords recovered from a persisted
    trace; the loop then continues after them. Because every iteration's
    randomness is derived from ``[seed, iteration]``, a resumed run is
    bit-identical to an uninterrupted one.
    """
    rge_config.validate()
    train_config.validate()
    if classifier not in ("gcn", "mlp"):
        raise ConfigError(f"unknown classifier {classifier!r}")
    ig_steps = (ig_config or IgConfig()).steps

    g0 = dataset.n_genes
    # sample correlation needs at least two genes, so the floor never drops
    # below 2 regardless of the configured fraction
    floor = max(2, min_gene_floor(g0, rge_config.min_gene_fraction))
    schedule = gene_count_schedule(g0, rge_config.elimination_rate, floor)

    tv = plan.trainval_idx
    train_local = _local_positions(tv, plan.train_idx)
    val_local = _local_positions(tv, plan.val_idx)
    labels_tv = dataset.labels[tv]
    n_classes = dataset.n_classes

    current = np.arange(g0)
    records = []
    start = 0
    if resume_records:
        records = list(resume_records)
        start = len(records)
        if start > len(schedule):
            raise ConfigError("resume trace has more iterations than the schedule")
        if [r.n_genes for r in records] != schedule[:start]:
            raise ConfigError("resume trace does not match the gene-count schedule")
        last = records[-1]
        current = last.gene_idx
        if start < len(schedule):
            current = _eliminate(current, last.importance,
                                 last.n_genes - schedule[start])
    for k, count in list(enumerate(schedule))[start:]:
        assert current.size == count
        sub = dataset.values[np.ix_(tv, current)]
        feats = Standardizer().fit(sub, rows=train_local).transform(sub)
        operator, graph = _operator_for(feats, classifier, tau)
        if graph is not None:
            set_masks(graph, feats.shape[0], train_local, val_local)
        train_mask = np.zeros(feats.shape[0], dtype=bool)
        train_mask[train_local] = True
        try:
            mdl, losses = fit(operator, feats, labels_tv, train_mask,
                              train_config, n_classes=n_classes,
                              conv_head=conv_head,
                              entropy=[rge_config.seed, k])
            preds, _ = predict(mdl, operator, feats)
            val_metrics = report.compute_metrics(preds[val_local],
                                                 labels_tv[val_local],
                                                 n_classes=n_classes)
            scores = aggregate_importance(
                mdl, operator, feats,
                IgConfig(steps=ig_steps, target_nodes=train_mask)).scores
            records.append(IterationRecord(
                iteration=k, gene_idx=current.copy(),
                val_accuracy=val_metrics.accuracy,
                val_macro_f1=val_metrics.macro_f1,
                importance=scores, final_train_loss=losses[-1]))
        except NumericError as exc:
            warnings.warn(f"iteration {k} failed ({exc}); "
                          "continuing with previous scores")
            scores = (records[-1].importance[
                _local_positions(records[-1].gene_idx, current)]
                if records else np.zeros(current.size))
            records.append(IterationRecord(
                iteration=k, gene_idx=current.copy(), val_accuracy=float("-inf"),
                val_macro_f1=float("-inf"), importance=scores,
                final_train_loss=float("nan"), failed=True))

        if k + 1 < len(schedule):
            current = _eliminate(current, scores, count - schedule[k + 1])

    best = _best_iteration(records)
    selected = records[best].gene_idx
    final_metrics, loss_curve = evaluate_subset(
        dataset, selected, plan, train_config, tau=tau, classifier=classifier,
        conv_head=conv_head, entropy=[rge_config.seed, FINAL_STREAM])
    return RgeTrace(
        iterations=records, best_iteration=best, selected_idx=selected,
        selected_genes=[dataset.gene_names[i] for i in selected],
        final_test=final_metrics.to_dict(), schedule=schedule,
        final_loss_curve=loss_curve)


def _eliminate(current, scores, n_remove):
    """Drop the ``n_remove`` lowest-scoring genes; ties break toward the
    lower gene index."""
    order = np.lexsort((np.arange(current.size), scores))
    return np.sort(current[order[n_remove:]])


def records_from_trace(trace_dict, gene_names):
    """Rebuild IterationRecords from a persisted trace for resumption."""
    index = {name: i for i, name in enumerate(gene_names)}
    records = []
    for entry in trace_dict["iterations"]:
        missing = [g for g in entry["gene_names"] if g not in index]
        if missing:
            raise DataError(f"trace gene(s) not in the dataset: {missing[:5]}")
        records.append(IterationRecord(
            iteration=entry["iteration"],
            gene_idx=np.array([index[g] for g in entry["gene_names"]]),
            val_accuracy=entry["val_accuracy"],
            val_macro_f1=entry["val_macro_f1"],
            importance=np.asarray(entry["importance"], dtype=np.float64),
            final_train_loss=entry["final_train_loss"],
            failed=entry["failed"]))
    return records


def _best_iteration(records):
    """Highest validation accuracy; ties resolved toward the later (smaller)
    subset."""
    best, best_acc = None, float("-inf")
    for i, rec in enumerate(records):
        if not rec.failed and rec.val_accuracy >= best_acc:
            best, best_acc = i, rec.val_accuracy
    if best is None:
        raise NumericError("every elimination iteration failed to train")
    return best


def evaluate_subset(dataset, gene_idx, plan, train_config, tau=0.7,
                    classifier="gcn", conv_head=False, entropy=None):
    """Retrain on train+validation and score the held-out test nodes.

    The graph spans all samples; the scaler and class weights come from the
    train+validation rows only, so test nodes never influence fitting.
    Returns ``(MetricBundle, loss_curve)``.
    """
    gene_idx = np.asarray(gene_idx)
    if gene_idx.size == 0:
        raise ConfigError("evaluate_subset: empty gene subset")
    sub = dataset.values[:, gene_idx]
    if np.all(sub[plan.trainval_idx].var(axis=0) == 0):
        raise DataError("gene subset has no variation on the training side")
    feats = Standardizer().fit(sub, rows=plan.trainval_idx).transform(sub)
    operator, graph = _operator_for(feats, classifier, tau)
    if graph is not None:
        set_masks(graph, feats.shape[0], plan.train_idx, plan.val_idx,
                  plan.test_idx)
    trainval_mask = np.zeros(feats.shape[0], dtype=bool)
    trainval_mask[plan.trainval_idx] = True
    if entropy is None:
        entropy = [train_config.seed, FINAL_STREAM]
    mdl, losses = fit(operator, feats, dataset.labels, trainval_mask,
                      train_config, n_classes=dataset.n_classes,
                      conv_head=conv_head, entropy=entropy)
    preds, _ = predict(mdl, operator, feats)
    metrics = report.compute_metrics(preds[plan.test_idx],
                                     dataset.labels[plan.test_idx],
                                     n_classes=dataset.n_classes)
    return metrics, losses


def repeat_and_summarize(dataset, plan, rge_config, train_config,
                         ig_config=None, classifier="gcn", tau=0.7,
                         conv_head=False, evaluate_gt=False,
                         resume_records=None):
    """Rerun the pipeline with seeds seed..seed+repeats-1 on fresh inner splits.

    The outer test split stays fixed. Returns ``(summary, traces)`` where the
    summary holds mean and sample standard deviation per metric (zero std for
    a single repeat).
    """
    rge_config.validate()
    if resume_records and rge_config.repeats != 1:
        raise ConfigError("resuming a trace requires repeats=1")
    labels = dataset.labels
    traces = []
    gt_metrics = []
    for r in range(rge_config.repeats):
        plan_r = resplit_inner(plan, labels, plan.seed + r)
        cfg_r = RgeConfig(elimination_rate=rge_config.elimination_rate,
                          min_gene_fraction=rge_config.min_gene_fraction,
                          seed=rge_config.seed + r, repeats=1)
        trace = run_rge(dataset, plan_r, cfg_r, train_config, ig_config,
                        classifier=classifier, tau=tau, conv_head=conv_head,
                        resume_records=resume_records if r == 0 else None)
        traces.append(trace)
        if evaluate_gt:
            if dataset.gt_deg is None:
                raise DataError("ground-truth evaluation requested but the "
                                "dataset has no gt_deg flags")
            gt_idx = np.flatnonzero(dataset.gt_deg)
            m, _ = evaluate_subset(dataset, gt_idx, plan_r, train_config,
                                   tau=tau, classifier=classifier,
                                   conv_head=conv_head,
                                   entropy=[rge_config.seed + r, FINAL_STREAM])
            gt_metrics.append(m)

    def agg(values):
        values = np.asarray(values, dtype=np.float64)
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
        return {"mean": float(values.mean()), "std": std}

    summary = {
        "repeats": rge_config.repeats,
        "test_accuracy": agg([t.final_test["accuracy"] for t in traces]),
        "test_macro_f1": agg([t.final_test["macro_f1"] for t in traces]),
        "n_selected": agg([t.selected_idx.size for t in traces]),
    }
    if dataset.gt_deg is not None:
        recoveries = [report.deg_recovery(t.selected_idx, dataset.gt_deg)
                      for t in traces]
        summary["n_true_degs"] = agg([r["n_true"] for r in recoveries])
        summary["gt_precision"] = agg([r["precision"] for r in recoveries])
        summary["gt_recall"] = agg([r["recall"] for r in recoveries])
    if gt_metrics:
        summary["gt_subset_accuracy"] = agg([m.accuracy for m in gt_metrics])
        summary["gt_subset_macro_f1"] = agg([m.macro_f1 for m in gt_metrics])
    return summary, traces
