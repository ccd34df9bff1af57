"""PALM trees: partially additive GLMs with subgroup-varying and global
coefficients.

Estimation alternates between fitting the global coefficients jointly with
subgroup-specific blocks for a fixed partition, and regrowing the tree on the
varying regressors with the global part held fixed through an offset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, RoleSpec, check_response, design_matrix, numeric
from .glm import FitResult, fit_interaction_glm, get_family, interaction_design, loglik_at
from .mob import ModelTree, TreeControl, aligned_design, grow_tree, predict_partition, refit_nodes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PalmControl:
    tree_control: TreeControl = TreeControl()
    max_iter: int = 15
    loglik_tol: float = 1e-4

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    loglik: float  # joint log-likelihood after the global refit
    n_leaves: int
    partition_changed: bool
    loglik_tree_step: float  # joint loglik at (tree leaf coefficients, previous gamma)


@dataclass
class PalmModel:
    tree: ModelTree
    spec: RoleSpec
    gamma: np.ndarray
    gamma_names: tuple[str, ...]
    leaf_coefficients: dict[int, np.ndarray]
    joint: FitResult | None
    trace: list[IterationRecord] = field(default_factory=list)
    converged: bool = True
    fixed_levels: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def n_leaves(self) -> int:
        return self.tree.n_leaves

    @property
    def loglik(self) -> float:
        if self.joint is not None:
            return self.joint.loglik
        return sum(nd.fit.loglik for nd in self.tree.leaves())

    def offset(self, ds: Dataset) -> np.ndarray:
        if not self.spec.fixed:
            return np.zeros(ds.n)
        Xf, _ = aligned_design(ds, self.spec.fixed, False, self.fixed_levels)
        return Xf @ self.gamma

    def summary(self) -> str:
        lines = [self.tree.summary()]
        if self.spec.fixed:
            lines.append("global coefficients:")
            lines.extend(f"  {name:<20s} {g: .6g}" for name, g in zip(self.gamma_names, self.gamma))
        return "\n".join(lines)


def _canonical(partition: np.ndarray) -> np.ndarray:
    _, first, inv = np.unique(partition, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inv]


def _split_joint(joint: FitResult, leaf_ids: np.ndarray, kv: int):
    coef = joint.coefficients
    blocks = {int(lid): coef[b * kv:(b + 1) * kv].copy() for b, lid in enumerate(leaf_ids)}
    return blocks, coef[len(leaf_ids) * kv:].copy()


def fit_palm(ds: Dataset, spec: RoleSpec, control: PalmControl = PalmControl()) -> PalmModel:
    """Fit a PALM tree; with no fixed regressors this is a plain GLM tree."""
    tc = control.tree_control
    if not spec.fixed:
        tree = grow_tree(ds, spec, tc)
        return PalmModel(tree, spec, np.zeros(0), (), tree.leaf_coefficients(), None, [], True)

    ds.require(spec.columns)
    y = check_response(ds, spec)
    Xv, _ = design_matrix(ds, spec.varying, spec.intercept)
    Xf, fnames = design_matrix(ds, spec.fixed, intercept=False)
    fixed_levels = {v: ds[v].levels for v in spec.fixed if ds[v].is_categorical}
    kv = Xv.shape[1]

    joint = fit_interaction_glm(ds, np.ones(ds.n, dtype=np.int64), spec)
    gamma = joint.coefficients[kv:]
    prev_part = np.zeros(ds.n, dtype=np.int64)
    prev_ll = joint.loglik
    seen = [prev_part]
    iterates = []  # (loglik, tree, joint, leaf_ids)
    trace: list[IterationRecord] = []
    converged = False
    chosen = None

    for t in range(1, control.max_iter + 1):
        try:
            offset = Xf @ gamma
            tree = grow_tree(ds, spec, tc, offset=offset)
            leaf = tree.train_leaf
            leaf_ids = np.unique(leaf)
            codes = np.searchsorted(leaf_ids, leaf)
            feasible = np.concatenate(
                [tree.nodes[int(lid)].fit.coefficients for lid in leaf_ids] + [gamma]
            )
            Xjoint = np.hstack([interaction_design(Xv, codes, len(leaf_ids)), Xf])
            ll_tree = loglik_at(Xjoint, y, feasible, spec.family)
            joint = fit_interaction_glm(ds, codes + 1, spec)
        except Exception as exc:  # noqa: BLE001 - any step failure ends the loop
            if not iterates:
                raise
            log.warning("PALM iteration %d failed (%s); returning best earlier iterate", t, exc)
            converged = False
            break
        gamma = joint.coefficients[len(leaf_ids) * kv:]
        part = _canonical(leaf)
        changed = not np.array_equal(part, prev_part)
        trace.append(IterationRecord(t, joint.loglik, len(leaf_ids), changed, ll_tree))
        iterates.append((joint.loglik, tree, joint, leaf_ids))
        if not changed:
            converged, chosen = True, len(iterates) - 1
            break
        if joint.loglik - prev_ll < control.loglik_tol:
            converged = True
            break
        if any(np.array_equal(part, s) for s in seen[:-1]):
            log.warning("PALM partitions cycle at iteration %d; keeping the best iterate", t)
            converged = False
            break
        seen.append(part)
        prev_part, prev_ll = part, joint.loglik
    else:
        log.warning("PALM did not converge in %d iterations", control.max_iter)

    if chosen is None:
        chosen = int(np.argmax([it[0] for it in iterates]))
    _, tree, joint, leaf_ids = iterates[chosen]
    blocks, gamma = _split_joint(joint, leaf_ids, kv)
    tree = refit_nodes(tree, ds, Xf @ gamma)
    return PalmModel(tree, spec, gamma, tuple(fnames), blocks, joint, trace, converged, fixed_levels)


def _linear_predictor(model, ds: Dataset, offset=None, override: dict | None = None):
    tree = model.tree if isinstance(model, PalmModel) else model
    if override:
        ds = Dataset({**ds.columns, **override})
    leaf = predict_partition(tree, ds)
    X, _ = aligned_design(ds, tree.spec.varying, tree.spec.intercept, tree.levels)
    coefs = model.leaf_coefficients if isinstance(model, PalmModel) else tree.leaf_coefficients()
    eta = np.empty(ds.n)
    for lid in np.unique(leaf):
        rows = leaf == lid
        eta[rows] = X[rows] @ coefs[int(lid)]
    if isinstance(model, PalmModel):
        eta = eta + model.offset(ds)
    if offset is not None:
        eta = eta + offset
    return eta, leaf


def predict_palm(model: PalmModel, ds: Dataset) -> np.ndarray:
    """Mean response g^{-1}(x_V' beta_leaf + x_F' gamma)."""
    eta, _ = _linear_predictor(model, ds)
    return get_family(model.spec.family).linkinv(eta)


def treatment_effects(model: PalmModel | ModelTree, ds: Dataset, treatment_col: str, offset=None) -> np.ndarray:
    """Per-observation estimated effect of a binary varying regressor.

    For the identity link this is the leaf coefficient of the treatment
    column; otherwise the difference of predicted means with the treatment
    switched on and off.
    """
    tree = model.tree if isinstance(model, PalmModel) else model
    spec = tree.spec
    if treatment_col not in spec.varying:
        raise ValueError(f"treatment column {treatment_col!r} is not a varying regressor")
    if spec.family == "gaussian":
        j = list(tree.x_names).index(treatment_col)
        leaf = predict_partition(tree, ds)
        coefs = model.leaf_coefficients if isinstance(model, PalmModel) else tree.leaf_coefficients()
        lookup = {lid: c[j] for lid, c in coefs.items()}
        return np.array([lookup[int(lid)] for lid in leaf])
    fam = get_family(spec.family)
    on, _ = _linear_predictor(model, ds, offset, {treatment_col: numeric(treatment_col, np.ones(ds.n))})
    off, _ = _linear_predictor(model, ds, offset, {treatment_col: numeric(treatment_col, np.zeros(ds.n))})
    return fam.linkinv(on) - fam.linkinv(off)
