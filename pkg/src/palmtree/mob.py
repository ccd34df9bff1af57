"""Model-based recursive partitioning of (generalized) linear models.

Each node fits the model on the varying regressors (optionally with an
offset), tests its scores for instability against every split variable, and
splits the most unstable variable at the point maximizing the summed child
log-likelihoods. Growth stops when no test is significant or the node gets
too small.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Column, Dataset, RoleSpec, SchemaError, check_response, design_matrix
from .fluctuation import DEFAULT_TRIM, InstabilityResult, choose, instability_tests
from .glm import FitResult, SingularDesignError, fit_glm, gaussian_loglik, get_family

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TreeControl:
    alpha: float = 0.05
    min_node_size: int | None = None  # default max(20, 10 * K)
    max_depth: int = 10
    trim: float = DEFAULT_TRIM
    max_split_candidates: int = 2000
    max_exhaustive_levels: int = 10

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")

    def minsize(self, k: int) -> int:
        m = max(20, 10 * k) if self.min_node_size is None else self.min_node_size
        if m < k + 1:
            raise ValueError(f"min_node_size {m} must be at least K+1 = {k + 1}")
        return m


@dataclass(frozen=True)
class Split:
    """Binary split rule. Numeric: ``z <= cutpoint`` goes left. Categorical:
    ``z in left_levels`` goes left, ``z in right_levels`` goes right."""

    variable: str
    cutpoint: float | None = None
    left_levels: tuple[str, ...] | None = None
    right_levels: tuple[str, ...] | None = None

    @property
    def is_categorical(self) -> bool:
        return self.left_levels is not None

    def describe(self, side: str) -> str:
        if self.is_categorical:
            levels = self.left_levels if side == "left" else self.right_levels
            return f"{self.variable} in {{{', '.join(levels)}}}"
        op = "<=" if side == "left" else ">"
        return f"{self.variable} {op} {self.cutpoint:.6g}"


@dataclass
class TreeNode:
    id: int
    fit: FitResult
    n_obs: int
    depth: int
    parent: int | None = None
    split: Split | None = None
    children: tuple[int, int] | None = None
    instability: list[InstabilityResult] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return self.children is None


@dataclass
class ModelTree:
    nodes: dict[int, TreeNode]
    spec: RoleSpec
    control: TreeControl
    x_names: tuple[str, ...]
    levels: dict[str, tuple[str, ...]]
    train_leaf: np.ndarray

    @property
    def root(self) -> TreeNode:
        return self.nodes[1]

    @property
    def family(self) -> str:
        return self.spec.family

    def leaves(self) -> list[TreeNode]:
        return [nd for nd in self.nodes.values() if nd.is_leaf]

    @property
    def n_leaves(self) -> int:
        return sum(nd.is_leaf for nd in self.nodes.values())

    def leaf_coefficients(self) -> dict[int, np.ndarray]:
        return {nd.id: nd.fit.coefficients for nd in self.leaves()}

    def rules(self, node_id: int) -> list[str]:
        out = []
        nd = self.nodes[node_id]
        while nd.parent is not None:
            parent = self.nodes[nd.parent]
            side = "left" if parent.children[0] == nd.id else "right"
            out.append(parent.split.describe(side))
            nd = parent
        return out[::-1]

    def summary(self) -> str:
        lines = []

        def walk(nid, indent):
            nd = self.nodes[nid]
            pad = "|   " * indent
            if nd.is_leaf:
                coefs = ", ".join(f"{k}={v:.4g}" for k, v in nd.fit.coef_dict().items())
                lines.append(f"{pad}[{nd.id}] n={nd.n_obs}: {coefs}")
                return
            lines.append(f"{pad}[{nd.id}] n={nd.n_obs} split on {nd.split.variable}")
            for side, child in zip(("left", "right"), nd.children):
                lines.append(f"{pad}|-- {nd.split.describe(side)}")
                walk(child, indent + 1)

        walk(1, 0)
        return "\n".join(lines)


def route(nodes: dict[int, TreeNode], ds: Dataset) -> tuple[np.ndarray, int]:
    """Send every row to a leaf; returns leaf ids and the count of rows that
    needed the unseen-level fallback."""
    leaf = np.ones(ds.n, dtype=np.int64)
    fallback = 0
    stack = [(1, np.arange(ds.n))]
    while stack:
        nid, idx = stack.pop()
        nd = nodes[nid]
        if nd.is_leaf or idx.size == 0:
            leaf[idx] = nid
            continue
        left, unseen = _goes_left(nodes, nd, ds, idx)
        fallback += unseen
        stack.append((nd.children[1], idx[~left]))
        stack.append((nd.children[0], idx[left]))
    if fallback:
        log.warning("%d row(s) had unseen categorical levels and used the fallback route", fallback)
    return leaf, fallback


def predict_partition(tree: ModelTree, ds: Dataset) -> np.ndarray:
    ds.require(tree.spec.split_vars)
    return route(tree.nodes, ds)[0]


def aligned_design(ds: Dataset, cols: Sequence[str], intercept: bool, levels: dict[str, tuple[str, ...]]):
    """Design matrix whose categorical columns use the training level tables."""
    fixed = {}
    for name in cols:
        col = ds[name]
        if col.is_categorical and name in levels and col.levels != levels[name]:
            lookup = {lev: i for i, lev in enumerate(levels[name])}
            try:
                vals = np.array([lookup[col.levels[v]] for v in col.values], dtype=np.int64)
            except KeyError as exc:
                raise SchemaError(f"column {name!r}: level {exc.args[0]!r} not seen in training") from None
            fixed[name] = Column(name, vals, levels[name])
    if fixed:
        ds = Dataset({**ds.columns, **fixed})
    return design_matrix(ds, cols, intercept)


def predict_response(tree: ModelTree, ds: Dataset, offset=None) -> np.ndarray:
    leaf = predict_partition(tree, ds)
    X, _ = aligned_design(ds, tree.spec.varying, tree.spec.intercept, tree.levels)
    eta = np.empty(ds.n)
    for nid in np.unique(leaf):
        rows = leaf == nid
        eta[rows] = X[rows] @ tree.nodes[nid].fit.coefficients
    if offset is not None:
        eta = eta + offset
    return get_family(tree.family).linkinv(eta)


@dataclass(frozen=True)
class SplitSearch:
    split: Split
    left: np.ndarray  # boolean mask over node rows
    loglik_left: float
    loglik_right: float

    @property
    def loglik(self) -> float:
        return self.loglik_left + self.loglik_right


def _has_intercept(X: np.ndarray) -> bool:
    return bool(np.any(np.all(X == 1.0, axis=0)))


def _gaussian_scan(Xs: np.ndarray, rs: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Summed child profile log-likelihoods for every left size in ``cand``
    (data already sorted by the split variable)."""
    n, k = Xs.shape
    if _has_intercept(Xs):
        rs = rs - rs.mean()
    xx = np.cumsum(Xs[:, :, None] * Xs[:, None, :], axis=0)
    xr = np.cumsum(Xs * rs[:, None], axis=0)
    rr = np.cumsum(rs**2)
    tot_xx, tot_xr, tot_rr = xx[-1], xr[-1], rr[-1]
    li = cand - 1
    out = np.zeros(len(cand))
    for part_xx, part_xr, part_rr, size in (
        (xx[li], xr[li], rr[li], cand),
        (tot_xx - xx[li], tot_xr - xr[li], tot_rr - rr[li], n - cand),
    ):
        u, s, vt = np.linalg.svd(part_xx)
        bad = s[:, -1] <= 1e-10 * s[:, 0]
        s_inv = np.where(s > 1e-10 * s[:, :1], 1.0 / np.where(s > 0, s, 1.0), 0.0)
        proj = np.einsum("bij,bj->bi", u.transpose(0, 2, 1), part_xr)
        fitted_ss = np.sum(proj**2 * s_inv, axis=1)
        rss = np.maximum(part_rr - fitted_ss, 0.0)
        ll = gaussian_loglik(rss, size)
        out += np.where(bad, -np.inf, ll)
    return out


def _child_loglik(X, y, family, offset):
    try:
        return fit_glm(X, y, family, offset=offset).loglik
    except SingularDesignError:
        return -np.inf


def find_split_point(
    X: np.ndarray,
    y: np.ndarray,
    z,
    family: str,
    offset: np.ndarray | None,
    min_node_size: int,
    control: TreeControl = TreeControl(),
    variable: str = "z",
    levels: Sequence[str] | None = None,
) -> SplitSearch | None:
    """Best binary split of a node along one variable.

    ``z`` is numeric, or level indices into ``levels`` for a categorical
    variable. Returns None when no admissible split exists.
    """
    n = len(y)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    z = np.asarray(z)
    if levels is None:
        return _numeric_split(X, y, z, family, off, min_node_size, control, variable)
    return _categorical_split(X, y, z, family, off, min_node_size, control, variable, levels)


def _numeric_split(X, y, z, family, off, minsize, control, variable):
    n = len(y)
    order = np.argsort(z, kind="mergesort")
    zs = z[order]
    i = np.arange(1, n)
    cand = i[(zs[1:] > zs[:-1]) & (i >= minsize) & (n - i >= minsize)]
    if cand.size == 0:
        return None
    if cand.size > control.max_split_candidates:
        pick = np.linspace(0, cand.size - 1, control.max_split_candidates).round().astype(int)
        cand = cand[np.unique(pick)]
    Xs, ys, os = X[order], y[order], off[order]
    if family == "gaussian":
        ll = _gaussian_scan(Xs, ys - os, cand)
    else:
        ll = np.array([
            _child_loglik(Xs[:c], ys[:c], family, os[:c]) + _child_loglik(Xs[c:], ys[c:], family, os[c:])
            for c in cand
        ])
    if np.all(ll == -np.inf):
        return None
    best = int(np.argmax(ll))
    c = int(cand[best])
    cut = 0.5 * (float(zs[c - 1]) + float(zs[c]))
    left = z <= cut
    ll_l = _child_loglik(X[left], y[left], family, off[left])
    ll_r = _child_loglik(X[~left], y[~left], family, off[~left])
    return SplitSearch(Split(variable, cutpoint=cut), left, ll_l, ll_r)


def _categorical_split(X, y, z, family, off, minsize, control, variable, levels):
    present = np.unique(z)
    c = len(present)
    if c < 2:
        return None
    if c <= control.max_exhaustive_levels:
        subsets = []
        rest = present[1:]
        for r in range(0, c - 1):
            for combo in itertools.combinations(rest, r):
                subsets.append((present[0],) + combo)
        subsets.sort()
    else:
        resid = y - off if family == "gaussian" else y
        means = np.array([resid[z == lev].mean() for lev in present])
        ordered = present[np.argsort(means, kind="mergesort")]
        subsets = [tuple(sorted(ordered[:j])) for j in range(1, c)]
    best, best_ll = None, -np.inf
    for sub in subsets:
        left = np.isin(z, sub)
        nl = int(left.sum())
        if nl < minsize or len(y) - nl < minsize:
            continue
        ll = _child_loglik(X[left], y[left], family, off[left]) + _child_loglik(
            X[~left], y[~left], family, off[~left])
        if ll > best_ll:
            best, best_ll = sub, ll
    if best is None:
        return None
    left = np.isin(z, best)
    right_codes = [lev for lev in present if lev not in best]
    split = Split(
        variable,
        left_levels=tuple(levels[j] for j in best),
        right_levels=tuple(levels[j] for j in right_codes),
    )
    ll_l = _child_loglik(X[left], y[left], family, off[left])
    ll_r = _child_loglik(X[~left], y[~left], family, off[~left])
    return SplitSearch(split, left, ll_l, ll_r)


def grow_tree(
    ds: Dataset,
    spec: RoleSpec,
    control: TreeControl = TreeControl(),
    offset: np.ndarray | None = None,
) -> ModelTree:
    """Grow a model-based tree for the varying part of ``spec``.

    The node model regresses the response on ``spec.varying`` (plus
    intercept) with ``offset``; fixed regressors are ignored here.
    """
    if not spec.split_vars:
        raise ValueError("no split variables given")
    ds.require(spec.columns)
    y = check_response(ds, spec)
    X, names = design_matrix(ds, spec.varying, spec.intercept)
    k = X.shape[1]
    minsize = control.minsize(k)
    off = np.zeros(ds.n) if offset is None else np.asarray(offset, dtype=float)
    if off.shape != (ds.n,):
        raise ValueError("offset length does not match data")
    split_data = {v: ds[v] for v in spec.split_vars}
    levels = {v: ds[v].levels for v in spec.varying if ds[v].is_categorical}

    nodes: dict[int, TreeNode] = {}
    train_leaf = np.zeros(ds.n, dtype=np.int64)
    counter = itertools.count(1)

    def fit_node(idx):
        return fit_glm(X[idx], y[idx], spec.family, offset=off[idx], column_names=names)

    def grow(idx, fit, depth, parent):
        nid = next(counter)
        node = TreeNode(nid, fit, len(idx), depth, parent)
        nodes[nid] = node
        if len(idx) < 2 * minsize or depth >= control.max_depth:
            train_leaf[idx] = nid
            return
        sub = Dataset({v: c.take(idx) for v, c in split_data.items()})
        node.instability = instability_tests(fit.scores, sub, spec.split_vars, control.trim)
        var = choose(node.instability, control.alpha)
        if var is None:
            train_leaf[idx] = nid
            return
        col = split_data[var]
        found = find_split_point(
            X[idx], y[idx], col.values[idx], spec.family, off[idx], minsize, control,
            variable=var, levels=col.levels,
        )
        if found is None:
            train_leaf[idx] = nid
            return
        left_idx, right_idx = idx[found.left], idx[~found.left]
        try:
            fit_l, fit_r = fit_node(left_idx), fit_node(right_idx)
        except SingularDesignError as exc:
            log.warning("node %d: child fit failed (%s); keeping node as leaf", nid, exc)
            train_leaf[idx] = nid
            return
        node.split = found.split
        left_id = nid + 1
        grow(left_idx, fit_l, depth + 1, nid)
        right_id = max(nodes) + 1
        grow(right_idx, fit_r, depth + 1, nid)
        node.children = (left_id, right_id)

    root_idx = np.arange(ds.n)
    grow(root_idx, fit_node(root_idx), 1, None)
    return ModelTree(nodes, spec, control, tuple(names), levels, train_leaf)


def refit_nodes(tree: ModelTree, ds: Dataset, offset: np.ndarray | None) -> ModelTree:
    """Refit every node model on the same structure with a new offset."""
    y = check_response(ds, tree.spec)
    X, names = design_matrix(ds, tree.spec.varying, tree.spec.intercept)
    off = np.zeros(ds.n) if offset is None else offset
    member = _node_membership(tree, ds)
    nodes = {}
    for nid, nd in tree.nodes.items():
        idx = member[nid]
        fit = fit_glm(X[idx], y[idx], tree.spec.family, offset=off[idx], column_names=names)
        nodes[nid] = TreeNode(nid, fit, nd.n_obs, nd.depth, nd.parent, nd.split, nd.children, nd.instability)
    return ModelTree(nodes, tree.spec, tree.control, tree.x_names, tree.levels, tree.train_leaf)


def _node_membership(tree: ModelTree, ds: Dataset) -> dict[int, np.ndarray]:
    member = {}
    stack = [(1, np.arange(ds.n))]
    while stack:
        nid, idx = stack.pop()
        member[nid] = idx
        nd = tree.nodes[nid]
        if nd.is_leaf:
            continue
        left, _ = _goes_left(tree.nodes, nd, ds, idx)
        stack.append((nd.children[0], idx[left]))
        stack.append((nd.children[1], idx[~left]))
    return member


def _goes_left(nodes: dict[int, TreeNode], nd: TreeNode, ds: Dataset, idx: np.ndarray):
    """Boolean left-mask for rows ``idx`` at an internal node, plus the
    number of rows routed by the unseen-level fallback."""
    sp = nd.split
    col = ds[sp.variable]
    if sp.is_categorical:
        if not col.is_categorical:
            raise SchemaError(f"split variable {sp.variable!r} must be categorical")
        names = np.asarray(col.levels, dtype=object)[col.values[idx]]
        left = np.isin(names, sp.left_levels)
        unseen = ~left & ~np.isin(names, sp.right_levels)
        if unseen.any():
            left[unseen] = nodes[nd.children[0]].n_obs >= nodes[nd.children[1]].n_obs
        return left, int(unseen.sum())
    if col.is_categorical:
        raise SchemaError(f"split variable {sp.variable!r} must be numeric")
    return col.values[idx] <= sp.cutpoint, 0
