"""Synthetic RNA-seq-like cohort generation with ground-truth DE labels.

Counts are drawn per gene/sample from a gamma-Poisson (negative binomial)
model: the expected count is the product of a per-sample depth factor
s_j ~ Uniform(0.2, 2.2), a per-gene baseline g_i ~ Exponential(mean 25), and
a fold change d_i ~ LogNormal(0, 1) applied to class-1 samples for the genes
designated differentially expressed (d_i = 1 otherwise). Dispersion is
controlled by ``phi``: Var = mu + mu^2/phi, so smaller phi is noisier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ExpressionDataset
from .errors import ConfigError
from .numcore import (make_rng, sample_exponential, sample_gamma_poisson,
                      sample_lognormal, sample_uniform)

DEPTH_RANGE = (0.2, 2.2)
BASELINE_MEAN = 25.0


@dataclass
class CohortSpec:
    """Parameters of one synthetic cohort."""

    n_samples: int = 200
    n_genes: int = 1000
    de_fraction: float = 0.30
    phi: float = 1.0
    seed: int = 0
    class_balance: float = 0.5  # fraction of samples assigned class 1

    def validate(self):
        if self.n_samples < 4:
            raise ConfigError("cohort needs at least 4 samples to be splittable")
        if not 0 < self.de_fraction < 1:
            raise ConfigError(f"de_fraction must be in (0,1), got {self.de_fraction}")
        if not self.phi > 0:
            raise ConfigError(f"phi must be > 0, got {self.phi}")
        n1 = int(round(self.class_balance * self.n_samples))
        if n1 <= 0 or n1 >= self.n_samples:
            raise ConfigError(
                f"class_balance={self.class_balance} leaves a class empty "
                f"for {self.n_samples} samples")


def generate(spec: CohortSpec) -> ExpressionDataset:
    """Draw one cohort. The draw order is fixed, so a seed pins every byte.

    Returns raw counts (samples x genes) with ``gt_deg`` marking the genes
    that received a non-unit fold change.
    """
    spec.validate()
    rng = make_rng(spec.seed)
    n, g = spec.n_samples, spec.n_genes

    n1 = int(round(spec.class_balance * n))
    labels = np.zeros(n, dtype=np.int64)
    labels[n - n1:] = 1

    depth = sample_uniform(*DEPTH_RANGE, rng, size=n)
    baseline = sample_exponential(BASELINE_MEAN, rng, size=g)

    n_de = math.ceil(spec.de_fraction * g)
    de_idx = np.sort(rng.choice(g, size=n_de, replace=False))
    fold = np.ones(g)
    fold[de_idx] = sample_lognormal(rng, size=n_de)

    mu = np.outer(depth, baseline)
    mu[labels == 1] *= fold
    counts = sample_gamma_poisson(mu, spec.phi, rng).astype(np.float64)

    gt = np.zeros(g, dtype=bool)
    gt[de_idx] = True
    width = max(4, len(str(g)))
    gene_names = [f"G{i + 1:0{width}d}" for i in range(g)]
    sample_ids = [f"S{j + 1:04d}" for j in range(n)]
    return ExpressionDataset(values=counts, gene_names=gene_names,
                             sample_ids=sample_ids, labels=labels,
                             gt_deg=gt, stage="raw-counts")


def manifest(spec: CohortSpec, dataset: ExpressionDataset) -> dict:
    """JSON-ready record of how a cohort was generated."""
    return {
        "n_samples": spec.n_samples,
        "n_genes": spec.n_genes,
        "de_fraction": spec.de_fraction,
        "phi": spec.phi,
        "seed": spec.seed,
        "class_balance": spec.class_balance,
        "n_gt_deg": int(dataset.gt_deg.sum()),
        "gt_deg_genes": [dataset.gene_names[i]
                         for i in np.flatnonzero(dataset.gt_deg)],
        "class_counts": {str(c): int((dataset.labels == c).sum())
                         for c in np.unique(dataset.labels)},
    }
