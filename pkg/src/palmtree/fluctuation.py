"""Score-based parameter instability tests.

Numeric split variables use the supLM functional of the cumulative score
process; categorical ones use a chi-squared statistic on per-level score
sums. The split variable is chosen by the smallest p-value subject to a
Bonferroni-adjusted significance check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import chi2

from .data import Dataset
from .glm import RANK_TOL, FitResult
from .suplm_dist import suplm_pvalue

DEFAULT_TRIM = 0.1


@dataclass(frozen=True)
class InstabilityResult:
    variable: str
    statistic: float
    p_value: float
    p_adjusted: float
    kind: str  # "ordered-supLM" | "categorical-chisq"
    testable: bool = True
    df: int = 0


@dataclass(frozen=True)
class WhiteScores:
    values: np.ndarray
    k_eff: int


def decorrelate_scores(scores: np.ndarray) -> WhiteScores:
    """Center and whiten scores to identity empirical covariance.

    Uses the symmetric inverse square root of S'S/n when it is of full rank,
    otherwise projects onto the K' non-degenerate eigendirections.
    """
    S = np.asarray(scores, dtype=float)
    n, k = S.shape
    if n <= k:
        raise ValueError("need more observations than score columns")
    S = S - S.mean(axis=0)
    cov = S.T @ S / n
    evals, evecs = np.linalg.eigh(cov)
    top = evals.max() if evals.size else 0.0
    if top <= 0:
        return WhiteScores(np.zeros((n, 0)), 0)
    keep = evals > RANK_TOL * top
    k_eff = int(keep.sum())
    if k_eff == k:
        root_inv = (evecs / np.sqrt(evals)) @ evecs.T
        return WhiteScores(S @ root_inv, k)
    basis = evecs[:, keep] / np.sqrt(evals[keep])
    return WhiteScores(S @ basis, k_eff)


def suplm_ordered(white: np.ndarray, z: np.ndarray, trim: float = DEFAULT_TRIM):
    """supLM statistic and p-value for scores ordered by a numeric variable.

    Returns ``(statistic, p_value, testable)``. Candidate break points lie
    inside the trimmed window and only between distinct values of ``z``.
    """
    if not 0 < trim < 0.5:
        raise ValueError("trim must lie in (0, 0.5)")
    white = np.asarray(white, dtype=float)
    n, k = white.shape
    if k == 0:
        return 0.0, 1.0, False
    order = np.argsort(z, kind="mergesort")
    zs = np.asarray(z)[order]
    proc = np.cumsum(white[order], axis=0) / np.sqrt(n)
    i = np.arange(1, n)  # i observations on the left
    lo, hi = int(np.ceil(n * trim)), int(np.floor(n * (1 - trim)))
    ok = (i >= lo) & (i <= hi) & (zs[1:] > zs[:-1])
    if not ok.any():
        return 0.0, 1.0, False
    idx = i[ok]
    t = idx / n
    lm = np.sum(proc[idx - 1] ** 2, axis=1) / (t * (1 - t))
    stat = float(lm.max())
    return stat, suplm_pvalue(stat, k, trim), True


def chisq_categorical(white: np.ndarray, z: np.ndarray):
    """Chi-squared instability statistic for a categorical variable.

    Returns ``(statistic, p_value, testable, df)``; levels absent from ``z``
    are ignored.
    """
    white = np.asarray(white, dtype=float)
    n, k = white.shape
    codes, inv = np.unique(np.asarray(z), return_inverse=True)
    c = len(codes)
    if c < 2 or k == 0:
        return 0.0, 1.0, False, 0
    sums = np.zeros((c, k))
    np.add.at(sums, inv, white)
    counts = np.bincount(inv, minlength=c)
    stat = float(np.sum(np.sum(sums**2, axis=1) / counts))
    df = (c - 1) * k
    return stat, float(chi2.sf(stat, df)), True, df


def instability_tests(
    scores: np.ndarray,
    ds: Dataset,
    split_vars: Sequence[str],
    trim: float = DEFAULT_TRIM,
) -> list[InstabilityResult]:
    white = decorrelate_scores(scores)
    J = len(split_vars)
    out = []
    for name in split_vars:
        col = ds[name]
        if col.is_categorical:
            stat, p, testable, df = chisq_categorical(white.values, col.values)
            kind = "categorical-chisq"
        else:
            stat, p, testable = suplm_ordered(white.values, col.values, trim)
            kind, df = "ordered-supLM", white.k_eff
        out.append(InstabilityResult(name, stat, p, min(1.0, J * p), kind, testable, df))
    return out


def select_split_variable(
    fit: FitResult,
    ds: Dataset,
    split_vars: Sequence[str],
    alpha: float = 0.05,
    trim: float = DEFAULT_TRIM,
):
    """Pick the variable with the smallest p-value if significant after
    Bonferroni adjustment.

    Returns ``(variable or None, results)``.
    """
    if not split_vars:
        raise ValueError("split_vars must be nonempty")
    results = instability_tests(fit.scores, ds, split_vars, trim)
    return choose(results, alpha), results


def choose(results: Sequence[InstabilityResult], alpha: float) -> str | None:
    best = None
    for r in results:
        if r.testable and (best is None or r.p_value < best.p_value):
            best = r
    if best is None or best.p_adjusted >= alpha:
        return None
    return best.variable
