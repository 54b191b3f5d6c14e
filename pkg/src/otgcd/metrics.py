"""Cluster-matching accuracies and class-count reports."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import LengthMismatch, NonSquare


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost permutation ``sigma`` (row ``i`` -> column ``sigma[i]``).

    Among all minimizers the lexicographically smallest permutation is
    returned: rows are fixed in order to the lowest column that still admits
    an optimal completion.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise NonSquare(f"cost matrix must be square, got {cost.shape}")
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    rows, cols = linear_sum_assignment(cost)
    best = cost[rows, cols].sum()
    tol = 1e-9 * max(1.0, np.abs(cost).max()) * n

    perm = np.empty(n, dtype=np.int64)
    free_rows = list(range(n))
    free_cols = list(range(n))
    fixed_cost = 0.0
    for i in range(n):
        free_rows.remove(i)
        for j in free_cols:
            rest_cols = [c for c in free_cols if c != j]
            rest = 0.0
            if free_rows:
                sub = cost[np.ix_(free_rows, rest_cols)]
                r, c = linear_sum_assignment(sub)
                rest = sub[r, c].sum()
            if fixed_cost + cost[i, j] + rest <= best + tol:
                perm[i] = j
                fixed_cost += cost[i, j]
                free_cols.remove(j)
                break
    return perm


def _contingency(pred: np.ndarray, truth: np.ndarray, size: int) -> np.ndarray:
    table = np.zeros((size, size), dtype=np.int64)
    np.add.at(table, (pred, truth), 1)
    return table


def _check(pred, truth):
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.shape[0]} predictions vs {truth.shape[0]} labels")
    if pred.size == 0:
        raise LengthMismatch("need at least one sample")
    return pred, truth


def _best_mapping(pred, truth, size):
    table = _contingency(pred, truth, size)
    perm = hungarian(-table)
    return perm, table[np.arange(size), perm].sum()


def accuracy_all(pred, truth, num_classes: int) -> float:
    """Fraction matched under the best one-to-one relabeling of clusters."""
    pred, truth = _check(pred, truth)
    size = max(num_classes, pred.max() + 1, truth.max() + 1)
    _, matched = _best_mapping(pred, truth, size)
    return float(matched / pred.size)


def accuracy_known(pred, truth, known_classes) -> float:
    """Identity-mapped accuracy on samples whose true class is known."""
    pred, truth = _check(pred, truth)
    mask = np.isin(truth, list(known_classes))
    if not mask.any():
        return float("nan")
    return float(np.mean(pred[mask] == truth[mask]))


def accuracy_unknown_aware(pred, truth, known_classes) -> float:
    """Matched accuracy after isolating the unknown-class samples."""
    pred, truth = _check(pred, truth)
    mask = ~np.isin(truth, list(known_classes))
    if not mask.any():
        raise ValueError("no sample with an unknown true class")
    p, t = pred[mask], truth[mask]
    _, p_idx = np.unique(p, return_inverse=True)
    _, t_idx = np.unique(t, return_inverse=True)
    size = max(p_idx.max(), t_idx.max()) + 1
    _, matched = _best_mapping(p_idx, t_idx, size)
    return float(matched / p.size)


def accuracy_unknown_agnostic(pred, truth, known_classes, num_classes: int | None = None) -> float:
    """Accuracy on unknown-class samples under a matching fitted on all samples."""
    pred, truth = _check(pred, truth)
    mask = ~np.isin(truth, list(known_classes))
    if not mask.any():
        raise ValueError("no sample with an unknown true class")
    size = max(num_classes or 0, pred.max() + 1, truth.max() + 1)
    perm, _ = _best_mapping(pred, truth, size)
    return float(np.mean(perm[pred[mask]] == truth[mask]))


def class_count_report(pred, num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(pred, dtype=np.int64), minlength=num_classes)


@dataclass
class MetricsReport:
    acc_all: float
    acc_known: float
    acc_unknown_aware: float
    acc_unknown_agnostic: float
    prior_l1_error: float
    predicted_class_counts: list = field(default_factory=list)
    epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(pred, truth, known_classes, num_classes: int, prior=None,
             true_prior=None, epoch: int = 0) -> MetricsReport:
    """All four accuracies plus the prior error.

    ``prior`` defaults to the predicted class frequencies and ``true_prior``
    to the class frequencies of ``truth``.
    """
    pred, truth = _check(pred, truth)
    counts = class_count_report(pred, num_classes)
    if true_prior is None:
        true_prior = class_count_report(truth, num_classes) / truth.size
    if prior is None:
        prior = counts / pred.size
    return MetricsReport(
        acc_all=accuracy_all(pred, truth, num_classes),
        acc_known=accuracy_known(pred, truth, known_classes),
        acc_unknown_aware=accuracy_unknown_aware(pred, truth, known_classes),
        acc_unknown_agnostic=accuracy_unknown_agnostic(pred, truth, known_classes, num_classes),
        prior_l1_error=float(np.abs(np.asarray(prior) - np.asarray(true_prior)).sum()),
        predicted_class_counts=[int(c) for c in counts],
        epoch=epoch,
    )
