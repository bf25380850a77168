"""Sample-similarity graph: thresholded Pearson correlation and its
symmetrically normalized propagation operator.

Nodes are samples; an undirected edge joins two samples whose expression
profiles correlate with |r| >= tau. The operator fed to the network is
D^{-1/2} (A + I) D^{-1/2}, where D holds the self-loop-augmented degrees, so
every node retains at least its own signal.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

DEFAULT_TAU = 0.7


@dataclass
class SampleGraph:
    n_nodes: int
    adjacency: np.ndarray  # boolean, symmetric, zero diagonal
    tau: float
    norm_operator: np.ndarray = field(default=None, repr=False)
    train_mask: np.ndarray | None = None
    val_mask: np.ndarray | None = None
    test_mask: np.ndarray | None = None


def pcc_matrix(features):
    """Pairwise Pearson correlation between sample rows.

    Rows with zero variance get correlation 0 to every other row (no edge)
    instead of propagating NaNs; the diagonal stays 1.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.shape[1] < 2:
        raise ConfigError("need at least 2 genes to correlate samples")
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    flat = norms == 0
    if flat.any():
        warnings.warn(f"{int(flat.sum())} sample(s) have zero variance; "
                      "their correlations are set to 0")
    safe = np.where(flat, 1.0, norms)
    corr = (centered @ centered.T) / np.outer(safe, safe)
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    np.clip(corr, -1.0, 1.0, out=corr)
    # snap values within rounding error of +-1 so exact duplicates (and
    # scalar multiples) survive a tau=1 threshold
    corr[corr > 1.0 - 1e-12] = 1.0
    corr[corr < -1.0 + 1e-12] = -1.0
    np.fill_diagonal(corr, 1.0)
    return corr


def threshold_graph(corr, tau=DEFAULT_TAU):
    """Build the unweighted graph with an edge wherever |r| >= tau (i != j)."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0,1], got {tau}")
    corr = np.asarray(corr)
    adj = np.abs(corr) >= tau
    np.fill_diagonal(adj, False)
    adj = adj & adj.T
    graph = SampleGraph(n_nodes=corr.shape[0], adjacency=adj, tau=tau)
    graph.norm_operator = normalize(graph)
    return graph


def normalize(graph):
    """Symmetric normalization of the self-loop-augmented adjacency."""
    a_hat = graph.adjacency.astype(np.float64)
    np.fill_diagonal(a_hat, a_hat.diagonal() + 1.0)
    inv_sqrt_deg = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * np.outer(inv_sqrt_deg, inv_sqrt_deg)


def build_graph(features, tau=DEFAULT_TAU):
    """Convenience: correlation -> threshold -> normalized operator."""
    return threshold_graph(pcc_matrix(features), tau=tau)


def set_masks(graph, n_nodes, train_idx, val_idx=None, test_idx=None):
    """Attach boolean node masks (indices are positions in the graph)."""
    def mask(idx):
        m = np.zeros(n_nodes, dtype=bool)
        if idx is not None:
            m[np.asarray(idx)] = True
        return m

    graph.train_mask = mask(train_idx)
    graph.val_mask = mask(val_idx)
    graph.test_mask = mask(test_idx)
    return graph


def export_edges(corr, graph, path):
    """Dump the surviving edges as (i, j, weight) rows for inspection."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "weight"])
        ii, jj = np.nonzero(np.triu(graph.adjacency, k=1))
        for i, j in zip(ii.tolist(), jj.tolist()):
            writer.writerow([i, j, repr(float(corr[i, j]))])
