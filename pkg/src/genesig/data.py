"""Dataset container, CSV ingestion, preprocessing chain, and splits.

The on-disk format is a rectangular CSV: header row of gene names with a
``sample_id`` first column and a label column (default ``label``), one sample
per row. Labels may instead live in a two-column sidecar CSV keyed by
sample id.

Preprocessing follows the usual counts pipeline: median-of-ratios size
factors, a log2(x+1) variance-stabilizing transform, near-zero-variance
gene filtering, then per-gene standardization. Every fitted quantity
(reference gene means, kept-gene set, scaler parameters) is derived from
training-side rows only and frozen before touching held-out rows.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError
from .numcore import make_rng

STAGES = ("raw-counts", "normalized", "transformed")


@dataclass
class ExpressionDataset:
    """Samples-by-genes expression matrix with labels and optional DE truth."""

    values: np.ndarray
    gene_names: list
    sample_ids: list
    labels: np.ndarray
    gt_deg: np.ndarray | None = None
    stage: str = "raw-counts"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 2:
            raise DataError("expression values must be 2-D (samples x genes)")
        n, g = self.values.shape
        if len(self.sample_ids) != n or self.labels.shape[0] != n:
            raise DataError("sample ids/labels do not match the number of rows")
        if len(self.gene_names) != g:
            raise DataError("gene names do not match the number of columns")
        if self.gt_deg is not None:
            self.gt_deg = np.asarray(self.gt_deg, dtype=bool)
            if self.gt_deg.shape[0] != g:
                raise DataError("gt_deg length does not match the gene count")
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def n_genes(self):
        return self.values.shape[1]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1

    def subset_genes(self, idx):
        idx = np.asarray(idx)
        return replace(
            self,
            values=self.values[:, idx],
            gene_names=[self.gene_names[i] for i in idx],
            gt_deg=None if self.gt_deg is None else self.gt_deg[idx],
        )


# ---------------------------------------------------------------------------
# CSV in/out
# ---------------------------------------------------------------------------

def load_csv(path, label_column="label", labels_path=None, stage="raw-counts"):
    """Parse a dataset CSV; malformed cells raise DataError naming the cell."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0] != "sample_id":
            raise DataError(f"{path}: first header column must be 'sample_id'")
        label_pos = None
        if label_column in header:
            label_pos = header.index(label_column)
        gene_cols = [(i, name) for i, name in enumerate(header)
                     if i != 0 and i != label_pos]
        gene_names = [name for _, name in gene_cols]

        sample_ids, rows, labels = [], [], []
        for r, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise DataError(
                    f"{path}: row {r}: expected {len(header)} fields, got {len(rec)}")
            sample_ids.append(rec[0])
            vals = np.empty(len(gene_cols))
            for k, (i, name) in enumerate(gene_cols):
                try:
                    v = float(rec[i])
                except ValueError:
                    raise DataError(
                        f"{path}: row {r}, column {name!r}: "
                        f"non-numeric value {rec[i]!r}") from None
                if not np.isfinite(v):
                    raise DataError(
                        f"{path}: row {r}, column {name!r}: "
                        f"non-finite value {rec[i]!r}")
                vals[k] = v
            rows.append(vals)
            if label_pos is not None:
                try:
                    labels.append(int(rec[label_pos]))
                except ValueError:
                    raise DataError(
                        f"{path}: row {r}, column {label_column!r}: "
                        f"bad label {rec[label_pos]!r}") from None

    if label_pos is None:
        if labels_path is None:
            raise DataError(
                f"{path}: no {label_column!r} column and no sidecar labels file")
        labels = _read_label_sidecar(labels_path, sample_ids)
    if not rows:
        raise DataError(f"{path}: no sample rows")
    return ExpressionDataset(values=np.vstack(rows), gene_names=gene_names,
                             sample_ids=sample_ids,
                             labels=np.asarray(labels, dtype=np.int64),
                             stage=stage)


def _read_label_sidecar(path, sample_ids):
    mapping = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        for r, rec in enumerate(reader, start=2):
            if len(rec) < 2:
                raise DataError(f"{path}: row {r}: expected sample_id,label")
            try:
                mapping[rec[0]] = int(rec[1])
            except ValueError:
                raise DataError(
                    f"{path}: row {r}: bad label {rec[1]!r}") from None
    missing = [s for s in sample_ids if s not in mapping]
    if missing:
        raise DataError(f"{path}: missing labels for samples {missing[:5]}")
    return [mapping[s] for s in sample_ids]


def save_csv(dataset, path, label_column="label"):
    """Write the CSV form; floats use repr so save->load round-trips exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", *dataset.gene_names, label_column])
        for j in range(dataset.n_samples):
            row = [dataset.sample_ids[j]]
            row.extend(repr(v) for v in dataset.values[j].tolist())
            row.append(int(dataset.labels[j]))
            writer.writerow(row)


def save_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# normalization / transformation / filtering
# ---------------------------------------------------------------------------

def median_ratio_normalize(counts, fit_rows=None):
    """Median-of-ratios depth normalization.

    The per-gene reference is the geometric mean over the fitting rows,
    using only genes positive in all fitting rows; each sample's size factor
    is the median ratio of its counts to that reference, and its row is
    divided by the factor. Returns ``(normalized, size_factors)``.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise DataError("median_ratio_normalize: negative counts")
    fit = counts if fit_rows is None else counts[np.asarray(fit_rows)]
    usable = (fit > 0).all(axis=0)
    size_factors = None
    if usable.any():
        log_ref = np.log(fit[:, usable]).mean(axis=0)
        ratios = counts[:, usable] / np.exp(log_ref)[None, :]
        # median over each sample's positive ratios: zero counts at reference
        # genes would otherwise drag sparse samples to a zero size factor
        if np.all((ratios > 0).any(axis=1)):
            size_factors = np.array(
                [np.median(row[row > 0]) for row in ratios])
        else:
            warnings.warn("a sample has no positive count at any reference "
                          "gene; falling back to total-count size factors")
    else:
        warnings.warn("no gene is positive in every fitting sample; "
                      "falling back to total-count size factors")
    if size_factors is None:
        totals = counts.sum(axis=1)
        fit_totals = totals if fit_rows is None else totals[np.asarray(fit_rows)]
        if np.any(fit_totals <= 0) or np.any(totals <= 0):
            raise DataError("cannot normalize: sample with zero total count")
        size_factors = totals / np.exp(np.mean(np.log(fit_totals)))
    return counts / size_factors[:, None], size_factors


def vst(values):
    """Variance-stabilizing transform: elementwise log2(x + 1)."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise DataError("vst: negative input")
    return np.log2(values + 1.0)


def nzv_filter(dataset, variance_floor=1e-8, fit_rows=None):
    """Drop genes whose variance over the fitting rows is below the floor.

    Returns ``(filtered_dataset, kept_indices)``; gene names and gt_deg are
    subset consistently.
    """
    vals = dataset.values if fit_rows is None else dataset.values[np.asarray(fit_rows)]
    variances = vals.var(axis=0)
    kept = np.flatnonzero(variances >= variance_floor)
    if kept.size == 0:
        raise ConfigError("near-zero-variance filter removed every gene")
    return dataset.subset_genes(kept), kept


class Standardizer:
    """Per-gene zero-mean/unit-variance scaling, fitted on chosen rows only."""

    def __init__(self):
        self.mean_ = None
        self.std_ = None

    def fit(self, values, rows=None):
        vals = values if rows is None else values[np.asarray(rows)]
        self.mean_ = vals.mean(axis=0)
        std = vals.std(axis=0)  # population variance, ddof=0
        std[std == 0] = 1.0
        self.std_ = std
        return self

    def transform(self, values):
        if self.mean_ is None:
            raise ConfigError("Standardizer used before fit")
        return (values - self.mean_) / self.std_

    def fit_transform(self, values, rows=None):
        return self.fit(values, rows).transform(values)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitPlan:
    """Nested split: outer trainval/test, inner train/val inside trainval."""

    test_fraction: float = 0.20
    inner_val_fraction: float = 0.25
    stratified: bool = True
    seed: int = 0
    trainval_idx: np.ndarray | None = field(default=None, repr=False)
    test_idx: np.ndarray | None = field(default=None, repr=False)
    train_idx: np.ndarray | None = field(default=None, repr=False)
    val_idx: np.ndarray | None = field(default=None, repr=False)


def _split_indices(indices, labels, fraction, rng, stratified):
    """Partition ``indices`` into (held-out, rest) by per-class fractions."""
    indices = np.asarray(indices)
    if stratified:
        classes, counts = np.unique(labels[indices], return_counts=True)
        if counts.min() < 2:
            warnings.warn("a class has fewer than 2 samples; "
                          "falling back to unstratified split")
            stratified = False
    held, rest = [], []
    if stratified:
        for c in classes:
            members = indices[labels[indices] == c]
            members = members[rng.permutation(members.size)]
            k = int(round(fraction * members.size))
            k = min(max(k, 1), members.size - 1)
            held.append(members[:k])
            rest.append(members[k:])
    else:
        perm = indices[rng.permutation(indices.size)]
        k = int(round(fraction * indices.size))
        k = min(max(k, 1), indices.size - 1)
        held.append(perm[:k])
        rest.append(perm[k:])
    return np.sort(np.concatenate(held)), np.sort(np.concatenate(rest))


def make_splits(labels, plan):
    """Materialize the nested split plan; deterministic under ``plan.seed``."""
    labels = np.asarray(labels)
    if not 0 < plan.test_fraction < 1 or not 0 < plan.inner_val_fraction < 1:
        raise ConfigError("split fractions must lie in (0,1)")
    outer_rng = make_rng([plan.seed, 0])
    test, trainval = _split_indices(np.arange(labels.size), labels,
                                    plan.test_fraction, outer_rng, plan.stratified)
    plan = replace(plan, trainval_idx=trainval, test_idx=test)
    return resplit_inner(plan, labels, plan.seed)


def resplit_inner(plan, labels, seed):
    """Redraw only the inner train/val split (used by repeated runs)."""
    labels = np.asarray(labels)
    inner_rng = make_rng([seed, 1])
    val, train = _split_indices(plan.trainval_idx, labels,
                                plan.inner_val_fraction, inner_rng, plan.stratified)
    return replace(plan, train_idx=train, val_idx=val)


def splits_to_json(plan):
    return {
        "test_fraction": plan.test_fraction,
        "inner_val_fraction": plan.inner_val_fraction,
        "stratified": plan.stratified,
        "seed": plan.seed,
        "trainval_idx": plan.trainval_idx.tolist(),
        "test_idx": plan.test_idx.tolist(),
        "train_idx": plan.train_idx.tolist(),
        "val_idx": plan.val_idx.tolist(),
    }


def splits_from_json(obj):
    return SplitPlan(
        test_fraction=obj["test_fraction"],
        inner_val_fraction=obj["inner_val_fraction"],
        stratified=obj["stratified"],
        seed=obj["seed"],
        trainval_idx=np.asarray(obj["trainval_idx"]),
        test_idx=np.asarray(obj["test_idx"]),
        train_idx=np.asarray(obj["train_idx"]),
        val_idx=np.asarray(obj["val_idx"]),
    )
