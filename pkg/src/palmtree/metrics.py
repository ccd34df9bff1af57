"""Evaluation metrics for subgroup recovery and treatment-effect estimation."""

from __future__ import annotations

from typing import Iterable

import numpy as np


def _comb2(x: np.ndarray) -> int:
    x = np.asarray(x, dtype=np.int64)
    return int(np.sum(x * (x - 1) // 2))


def adjusted_rand_index(a, b) -> float:
    """Adjusted Rand index between two partitions (label values are arbitrary).

    Pair counts are exact integers; only the final ratio is floating point.
    Two partitions that both put all rows in one cluster (or both use
    singletons) agree perfectly and score 1.0.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("partitions must be 1-d and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two observations")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    sum_ij = _comb2(table.ravel())
    sum_a = _comb2(table.sum(axis=1))
    sum_b = _comb2(table.sum(axis=0))
    total = n * (n - 1) // 2
    # scale by total to stay in exact integer arithmetic
    num = sum_ij * total - sum_a * sum_b
    den = (sum_a + sum_b) * total - 2 * sum_a * sum_b
    if den == 0:
        return 1.0
    return float(2 * num / den)


def count_subgroups(model) -> int:
    """Number of terminal nodes of a fitted tree-like model."""
    return int(model.n_leaves)


def _treat(effects) -> np.ndarray:
    # strictly positive benefit means "treat"; zero means "do not treat"
    return np.asarray(effects, dtype=float) > 0


def regime_accuracy(estimated_effects, true_effects) -> float:
    """Share of observations whose recommended treatment matches the truth."""
    est = np.asarray(estimated_effects)
    true = np.asarray(true_effects)
    if est.shape != true.shape:
        raise ValueError("length mismatch")
    if est.size == 0:
        return float("nan")
    return float(np.mean(_treat(est) == _treat(true)))


def treatment_mae(estimated_effects, true_effects) -> float:
    est = np.asarray(estimated_effects, dtype=float)
    true = np.asarray(true_effects, dtype=float)
    if est.shape != true.shape:
        raise ValueError("length mismatch")
    return float(np.mean(np.abs(est - true)))


def type1_rate(runs: Iterable) -> float:
    """Fraction of fitted models (or subgroup counts) with more than one leaf."""
    counts = [r if isinstance(r, (int, np.integer)) else count_subgroups(r) for r in runs]
    if not counts:
        raise ValueError("no runs given")
    return float(np.mean(np.asarray(counts) > 1))
