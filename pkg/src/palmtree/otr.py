"""Optimal treatment regimes via an outcome model and a weighted
classification tree.

The outcome model has main effects for the intercept, the treatment and the
fixed covariates plus treatment-by-characteristic interactions. Each row is
labelled by the sign of its predicted benefit and weighted by the absolute
benefit, and a cost-complexity pruned CART learns the regime.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, RoleSpec, SchemaError, check_response, design_matrix
from .glm import FitResult, SingularDesignError, fit_glm, get_family

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OutcomeModel:
    fit: FitResult
    treatment: str
    fixed: tuple[str, ...]
    split_vars: tuple[str, ...]
    family: str
    columns: tuple[str, ...]  # retained design columns

    def design(self, ds: Dataset, treatment_value: float | None = None) -> np.ndarray:
        X, names = _outcome_design(ds, self.treatment, self.fixed, self.split_vars, treatment_value)
        keep = [names.index(c) for c in self.columns]
        return X[:, keep]


def _outcome_design(ds, treatment, fixed, split_vars, treatment_value=None):
    xa = np.asarray(ds[treatment].values, dtype=float)
    if treatment_value is not None:
        xa = np.full(ds.n, float(treatment_value))
    main, main_names = design_matrix(ds, fixed, intercept=False)
    zmat, znames = design_matrix(ds, split_vars, intercept=False)
    X = np.hstack([np.ones((ds.n, 1)), xa[:, None], main, xa[:, None] * zmat])
    names = ["(Intercept)", treatment] + main_names + [f"{treatment}:{z}" for z in znames]
    return X, names


def fit_outcome_model(ds: Dataset, spec: RoleSpec, treatment: str | None = None) -> OutcomeModel:
    """Fit the outcome GLM with treatment x split-variable interactions.

    ``treatment`` defaults to the single non-intercept varying column of
    ``spec``. Collinear interaction columns are dropped with a warning.
    """
    if treatment is None:
        if len(spec.varying) != 1:
            raise ValueError("give the treatment column explicitly")
        treatment = spec.varying[0]
    xa = ds[treatment].values
    if ds[treatment].is_categorical or not np.all(np.isin(xa, (0, 1))):
        raise SchemaError(f"treatment {treatment!r} must be a 0/1 column")
    if np.unique(xa).size < 2:
        raise SchemaError(f"treatment {treatment!r} is constant")
    y = check_response(ds, spec)
    fixed = tuple(c for c in spec.fixed if c != treatment)
    split_vars = tuple(spec.split_vars)
    X, names = _outcome_design(ds, treatment, fixed, split_vars)
    keep = list(range(len(names)))
    for _ in range(len(names)):
        try:
            fit = fit_glm(X[:, keep], y, spec.family, column_names=[names[j] for j in keep])
            break
        except SingularDesignError as exc:
            drop = [names.index(c) for c in exc.collinear if c.startswith(f"{treatment}:")]
            if not drop:
                raise
            log.warning("dropping collinear interaction column(s): %s", ", ".join(names[j] for j in drop))
            keep = [j for j in keep if j not in drop]
    return OutcomeModel(fit, treatment, fixed, split_vars, spec.family, tuple(names[j] for j in keep))


def predicted_benefit(model: OutcomeModel, ds: Dataset):
    """Labels I(mu1 - mu0 > 0) and weights |mu1 - mu0| for every row."""
    fam = get_family(model.family)
    beta = model.fit.coefficients
    mu1 = fam.linkinv(model.design(ds, 1.0) @ beta)
    mu0 = fam.linkinv(model.design(ds, 0.0) @ beta)
    diff = mu1 - mu0
    return diff > 0, np.abs(diff)


@dataclass
class ClassNode:
    w0: float
    w1: float
    n: int
    depth: int
    variable: str | None = None
    threshold: float | None = None
    left_levels: tuple[str, ...] | None = None
    left: int | None = None
    right: int | None = None
    collapse_alpha: float = np.inf  # cost-complexity level at which this node becomes a leaf
    seen_levels: tuple[str, ...] = ()  # categorical levels present when the split was made

    @property
    def is_split(self) -> bool:
        return self.left is not None

    @property
    def treat(self) -> bool:
        return self.w1 > self.w0  # ties go to control

    @property
    def risk(self) -> float:
        return self.w0 if self.treat else self.w1


@dataclass
class ClassTree:
    nodes: list[ClassNode]
    alpha: float = 0.0
    cv_table: list[tuple[float, float, float]] = field(default_factory=list)  # (alpha, cost, se)

    def _active(self, i: int) -> bool:
        nd = self.nodes[i]
        return nd.is_split and nd.collapse_alpha > self.alpha

    def apply(self, ds: Dataset, rows=None) -> np.ndarray:
        """Leaf index for every row (or for ``rows`` only)."""
        rows = np.arange(ds.n) if rows is None else np.asarray(rows, dtype=np.int64)
        out = np.zeros(ds.n, dtype=np.int64)
        stack = [(0, rows)]
        while stack:
            i, idx = stack.pop()
            nd = self.nodes[i]
            if idx.size == 0:
                continue
            if not self._active(i):
                out[idx] = i
                continue
            col = ds[nd.variable]
            if nd.left_levels is not None:
                names = np.asarray(col.levels, dtype=object)[col.values[idx]]
                go = np.isin(names, nd.left_levels)
                unseen = ~np.isin(names, nd.seen_levels)
                if unseen.any():
                    left_w = self.nodes[nd.left].w0 + self.nodes[nd.left].w1
                    right_w = self.nodes[nd.right].w0 + self.nodes[nd.right].w1
                    go[unseen] = left_w >= right_w
            else:
                go = col.values[idx] <= nd.threshold
            stack.append((nd.right, idx[~go]))
            stack.append((nd.left, idx[go]))
        return out[rows]

    def predict(self, ds: Dataset, rows=None) -> np.ndarray:
        treat = np.array([nd.treat for nd in self.nodes])
        return treat[self.apply(ds, rows)]

    @property
    def n_leaves(self) -> int:
        count = 0
        stack = [0]
        while stack:
            i = stack.pop()
            if self._active(i):
                stack.extend((self.nodes[i].left, self.nodes[i].right))
            else:
                count += 1
        return count


def _best_split(z, levels, lab, w, min_leaf_weight, parent_imp):
    """Best Gini split of one variable; returns (impurity, threshold or left
    levels) or None."""
    w1 = w * lab
    w0 = w - w1
    if levels is not None:
        present = np.unique(z)
        if present.size < 2:
            return None
        s1 = np.bincount(z, weights=w1, minlength=len(levels))[present]
        s0 = np.bincount(z, weights=w0, minlength=len(levels))[present]
        tot = s0 + s1
        p1 = np.divide(s1, tot, out=np.zeros_like(s1), where=tot > 0)
        order = np.argsort(p1, kind="mergesort")
        c1, c0 = np.cumsum(s1[order])[:-1], np.cumsum(s0[order])[:-1]
        keys = present[order]
        bounds = np.arange(1, present.size)
    else:
        order = np.argsort(z, kind="mergesort")
        zs = z[order]
        c1 = np.cumsum(w1[order])[:-1]
        c0 = np.cumsum(w0[order])[:-1]
        bounds = np.flatnonzero(zs[1:] > zs[:-1]) + 1
        c1, c0 = c1[bounds - 1], c0[bounds - 1]
    T1, T0 = w1.sum(), w0.sum()
    wl = c1 + c0
    wr = (T1 + T0) - wl
    ok = (wl >= min_leaf_weight) & (wr >= min_leaf_weight) & (wl > 0) & (wr > 0)
    if not ok.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        imp_l = wl - (c1**2 + c0**2) / wl
        imp_r = wr - ((T1 - c1) ** 2 + (T0 - c0) ** 2) / wr
    imp = np.where(ok, imp_l + imp_r, np.inf)
    j = int(np.argmin(imp))
    if not imp[j] < parent_imp - 1e-12:
        return None
    if levels is not None:
        return float(imp[j]), tuple(sorted(int(k) for k in keys[: bounds[j]]))
    b = bounds[j]
    return float(imp[j]), 0.5 * (float(zs[b - 1]) + float(zs[b]))


def _grow(ds, split_vars, lab, w, min_leaf_weight, max_depth):
    nodes: list[ClassNode] = []
    cols = {v: ds[v] for v in split_vars}

    def grow(idx, depth):
        ww, ll = w[idx], lab[idx]
        w1 = float(np.sum(ww * ll))
        w0 = float(np.sum(ww) - w1)
        i = len(nodes)
        nodes.append(ClassNode(w0, w1, len(idx), depth))
        W = w0 + w1
        parent_imp = W - (w0**2 + w1**2) / W if W > 0 else 0.0
        if depth >= max_depth or W <= 0 or parent_imp <= 1e-12 * W or W < 2 * min_leaf_weight:
            return i
        best = None
        for v in split_vars:
            col = cols[v]
            res = _best_split(col.values[idx], col.levels, ll, ww, min_leaf_weight, parent_imp)
            if res is not None and (best is None or res[0] < best[1]):
                best = (v, res[0], res[1])
        if best is None:
            return i
        v, _, rule = best
        col = cols[v]
        nd = nodes[i]
        nd.variable = v
        if col.levels is not None:
            go = np.isin(col.values[idx], rule)
            nd.left_levels = tuple(col.levels[k] for k in rule)
            nd.seen_levels = tuple(col.levels[k] for k in np.unique(col.values[idx]))
        else:
            go = col.values[idx] <= rule
            nd.threshold = rule
        nd.left = grow(idx[go], depth + 1)
        nd.right = grow(idx[~go], depth + 1)
        return i

    grow(np.arange(ds.n), 0)
    return nodes


def _cost_complexity(nodes: list[ClassNode]) -> list[float]:
    """Assign weakest-link collapse levels; returns the increasing alpha path."""
    collapsed = set()

    def subtree(i):
        # (risk of subtree leaves, number of leaves) in the current pruned tree
        nd = nodes[i]
        if not nd.is_split or i in collapsed:
            return nd.risk, 1
        rl, nl = subtree(nd.left)
        rr, nr = subtree(nd.right)
        return rl + rr, nl + nr

    path = [0.0]
    while True:
        internal = [i for i, nd in enumerate(nodes) if nd.is_split and i not in collapsed and _reachable(nodes, i, collapsed)]
        if not internal:
            break
        g = {}
        for i in internal:
            r_sub, leaves = subtree(i)
            g[i] = max((nodes[i].risk - r_sub) / (leaves - 1), 0.0)
        a = min(g.values())
        for i in internal:
            if g[i] <= a + 1e-12 * max(1.0, a):
                nodes[i].collapse_alpha = a
                collapsed.add(i)
        if a > path[-1]:
            path.append(a)
    return path


def _reachable(nodes, i, collapsed):
    # a node is in the pruned tree unless an ancestor is collapsed
    return i not in _descendants_of(nodes, collapsed)


def _descendants_of(nodes, collapsed):
    out = set()
    stack = []
    for c in collapsed:
        nd = nodes[c]
        if nd.is_split:
            stack.extend((nd.left, nd.right))
    while stack:
        j = stack.pop()
        if j in out:
            continue
        out.add(j)
        nd = nodes[j]
        if nd.is_split:
            stack.extend((nd.left, nd.right))
    return out


def fit_weighted_cart(
    ds: Dataset,
    split_vars: Sequence[str],
    labels,
    weights,
    min_leaf_weight: float | None = None,
    max_depth: int = 10,
    cv_folds: int = 10,
    seed: int = 0,
) -> ClassTree:
    """Weighted Gini classification tree with cost-complexity pruning.

    The pruning level is chosen by ``cv_folds``-fold cross-validation of the
    weighted misclassification cost with the one-standard-error rule.
    ``min_leaf_weight`` defaults to 1% of the total weight.
    """
    lab = np.asarray(labels, dtype=bool).astype(float)
    w = np.asarray(weights, dtype=float)
    total = float(w.sum())
    if total <= 0:
        return ClassTree([ClassNode(0.0, 0.0, ds.n, 0)])
    frac = 0.01 if min_leaf_weight is None else min_leaf_weight / total
    nodes = _grow(ds, split_vars, lab, w, frac * total, max_depth)
    path = _cost_complexity(nodes)
    tree = ClassTree(nodes)
    if len(path) == 1 or cv_folds < 2 or ds.n < cv_folds:
        return tree

    rng = np.random.default_rng(seed)
    fold = rng.permutation(ds.n) % cv_folds
    probes = [np.sqrt(path[k] * path[k + 1]) for k in range(len(path) - 1)] + [path[-1] * 2 + 1.0]
    miss = np.zeros((len(probes), ds.n))
    for f in range(cv_folds):
        tr, te = np.flatnonzero(fold != f), np.flatnonzero(fold == f)
        wt = w[tr]
        if wt.sum() <= 0:
            continue
        sub = _grow(ds.take(tr), split_vars, lab[tr], wt, frac * wt.sum(), max_depth)
        _cost_complexity(sub)
        for k, a in enumerate(probes):
            pred = ClassTree(sub, alpha=a).predict(ds, te)
            miss[k, te] = pred != lab[te].astype(bool)
    loss = miss * w[None, :] * (ds.n / total)
    cost = loss.mean(axis=1)
    se = loss.std(axis=1, ddof=1) / np.sqrt(ds.n)
    best = int(np.argmin(cost))
    ok = np.flatnonzero(cost <= cost[best] + se[best])
    chosen = int(ok.max())
    tree.alpha = path[chosen]
    tree.cv_table = [(path[k], float(cost[k]), float(se[k])) for k in range(len(path))]
    return tree


def otr_regime(tree: ClassTree, ds: Dataset, rows=None) -> np.ndarray:
    """Recommended treatment (True = treat) for every row, or for ``rows``."""
    return tree.predict(ds, rows)


@dataclass
class OTRModel:
    outcome: OutcomeModel
    tree: ClassTree

    @property
    def n_leaves(self) -> int:
        return self.tree.n_leaves


def fit_otr(ds: Dataset, spec: RoleSpec, treatment: str | None = None, seed: int = 0,
            cv_folds: int = 10, max_depth: int = 10) -> OTRModel:
    outcome = fit_outcome_model(ds, spec, treatment)
    labels, weights = predicted_benefit(outcome, ds)
    tree = fit_weighted_cart(ds, spec.split_vars, labels, weights, max_depth=max_depth,
                             cv_folds=cv_folds, seed=seed)
    return OTRModel(outcome, tree)
