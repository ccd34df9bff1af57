"""JSON model documents and DOT export."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import RoleSpec
from .glm import FitResult, get_family
from .mob import ModelTree, Split, TreeControl, TreeNode
from .palm import IterationRecord, PalmModel

FORMAT = "palmtree-model"
FORMAT_VERSION = 1


class DocumentError(ValueError):
    pass


def _split_to_dict(sp: Split | None):
    if sp is None:
        return None
    if sp.is_categorical:
        return {"variable": sp.variable, "left_levels": list(sp.left_levels),
                "right_levels": list(sp.right_levels)}
    return {"variable": sp.variable, "cutpoint": sp.cutpoint}


def _split_from_dict(d) -> Split | None:
    if d is None:
        return None
    if "cutpoint" in d:
        return Split(d["variable"], cutpoint=float(d["cutpoint"]))
    return Split(d["variable"], left_levels=tuple(d["left_levels"]), right_levels=tuple(d["right_levels"]))


def to_document(model: PalmModel, treatment: str | None = None, split_types: dict | None = None) -> dict:
    tree = model.tree
    spec = model.spec
    names = list(tree.x_names)
    nodes = []
    for nid in sorted(tree.nodes):
        nd = tree.nodes[nid]
        nodes.append({
            "id": nd.id,
            "parent": nd.parent,
            "depth": nd.depth,
            "n_obs": nd.n_obs,
            "split": _split_to_dict(nd.split),
            "children": list(nd.children) if nd.children else None,
            "coefficients": dict(zip(names, map(float, nd.fit.coefficients))),
            "loglik": nd.fit.loglik,
            "instability": [
                {"variable": r.variable, "statistic": r.statistic, "p_value": r.p_value,
                 "p_adjusted": r.p_adjusted, "kind": r.kind}
                for r in nd.instability
            ],
        })
    return {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "family": spec.family,
        "roles": {
            "response": spec.response, "varying": list(spec.varying), "fixed": list(spec.fixed),
            "split_vars": list(spec.split_vars), "intercept": spec.intercept,
            "allow_overlap": spec.allow_overlap,
        },
        "treatment": treatment,
        "x_names": names,
        "levels": {k: list(v) for k, v in {**tree.levels, **model.fixed_levels}.items()},
        "split_types": dict(split_types or {}),
        "nodes": nodes,
        "leaf_coefficients": {str(k): dict(zip(names, map(float, v))) for k, v in model.leaf_coefficients.items()},
        "gamma": dict(zip(model.gamma_names, map(float, model.gamma))),
        "trace": [
            {"iteration": r.iteration, "loglik": r.loglik, "n_leaves": r.n_leaves,
             "partition_changed": r.partition_changed, "loglik_tree_step": r.loglik_tree_step}
            for r in model.trace
        ],
        "converged": model.converged,
        "loglik": model.loglik,
    }


def dumps(doc: dict) -> str:
    # repr-based float output round-trips every double exactly
    return json.dumps(doc, indent=2)


def save(doc: dict, path: str | Path) -> None:
    Path(path).write_text(dumps(doc) + "\n", encoding="utf-8")


def load(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DocumentError(f"{path}: not a valid JSON model document ({exc})") from None
    if doc.get("format") != FORMAT:
        raise DocumentError(f"{path}: not a {FORMAT} document")
    if doc.get("format_version") != FORMAT_VERSION:
        raise DocumentError(
            f"{path}: unsupported format version {doc.get('format_version')!r} (expected {FORMAT_VERSION})"
        )
    return doc


def from_document(doc: dict) -> PalmModel:
    """Rebuild a predictive PalmModel (node fits carry coefficients only)."""
    roles = doc["roles"]
    spec = RoleSpec(
        roles["response"], tuple(roles["varying"]), tuple(roles["fixed"]), tuple(roles["split_vars"]),
        doc["family"], roles["intercept"], roles["allow_overlap"],
    )
    fam = get_family(doc["family"])
    names = tuple(doc["x_names"])
    nodes = {}
    for nd in doc["nodes"]:
        coef = np.array([nd["coefficients"][k] for k in names], dtype=float)
        fit = FitResult(coef, float("nan"), nd["loglik"], np.empty((0, len(names))), nd["n_obs"], True,
                        names, fam, np.empty(0))
        nodes[nd["id"]] = TreeNode(
            nd["id"], fit, nd["n_obs"], nd["depth"], nd["parent"], _split_from_dict(nd["split"]),
            tuple(nd["children"]) if nd["children"] else None,
        )
    levels = {k: tuple(v) for k, v in doc["levels"].items()}
    tree = ModelTree(nodes, spec, TreeControl(), names,
                     {k: v for k, v in levels.items() if k in spec.varying}, np.empty(0, dtype=np.int64))
    leaf_coefs = {int(k): np.array([v[n] for n in names], dtype=float) for k, v in doc["leaf_coefficients"].items()}
    gamma_names = tuple(doc["gamma"])
    gamma = np.array([doc["gamma"][k] for k in gamma_names], dtype=float)
    trace = [IterationRecord(**r) for r in doc.get("trace", [])]
    return PalmModel(tree, spec, gamma, gamma_names, leaf_coefs, None, trace, doc.get("converged", True),
                     {k: v for k, v in levels.items() if k in spec.fixed})


def to_dot(model: PalmModel) -> str:
    tree = model.tree
    lines = ["digraph tree {", '  node [shape=box, fontname="Helvetica"];']
    for nid in sorted(tree.nodes):
        nd = tree.nodes[nid]
        if nd.is_leaf:
            coefs = model.leaf_coefficients.get(nid, nd.fit.coefficients)
            body = "\\n".join(f"{k} = {v:.4g}" for k, v in zip(tree.x_names, coefs))
            lines.append(f'  n{nid} [label="Node {nid} (n = {nd.n_obs})\\n{body}"];')
        else:
            lines.append(f'  n{nid} [shape=ellipse, label="{nd.split.variable}\\nNode {nid} (n = {nd.n_obs})"];')
    for nid in sorted(tree.nodes):
        nd = tree.nodes[nid]
        if nd.is_leaf:
            continue
        for side, child in zip(("left", "right"), nd.children):
            rule = nd.split.describe(side).replace(nd.split.variable + " ", "").replace('"', "'")
            lines.append(f'  n{nid} -> n{child} [label="{rule}"];')
    if model.spec.fixed:
        gamma = "\\n".join(f"{k} = {v:.4g}" for k, v in zip(model.gamma_names, model.gamma))
        lines.append(f'  global [shape=note, label="global\\n{gamma}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
