"""Simulated treatment-effect data and benchmark orchestration.

Data follow a tree-structured treatment effect on correlated patient
characteristics, with a few characteristics acting as prognostic factors.
Designs: the one-at-a-time ("star") grid, the no-subgroup type-1 design and
the full factorial grid (optionally subsampled).
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import pandas as pd

from .data import Dataset, RoleSpec, numeric
from .metrics import adjusted_rand_index, regime_accuracy, treatment_mae
from .mob import TreeControl, grow_tree
from .otr import fit_otr, otr_regime
from .palm import PalmControl, fit_palm, treatment_effects

log = logging.getLogger(__name__)

DELTA_BETAS = (0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5)
NS = (100, 300, 500, 700, 900)
QUALITATIVE = (True, False)
MS = (10, 30, 50, 70)
PS = (1, 2, 3, 4)
QS = (1, 2, 3, 4)
METHODS = ("palm", "lmtree1", "lmtree2", "otr")
SCENARIO_FIELDS = ("delta_beta", "n", "qualitative", "m", "p", "q")


@dataclass(frozen=True)
class SimConfig:
    delta_beta: float = 0.5
    n: int = 300
    qualitative: bool = True
    m: int = 30
    p: int = 2
    q: int = 2
    error_scale: float = 1.5  # variance of the noise term
    seed: int = 0

    def __post_init__(self):
        if self.p < 0 or self.q < 0 or self.p + self.q > self.m:
            raise ValueError(f"need 0 <= p, 0 <= q and p + q <= m (got p={self.p}, q={self.q}, m={self.m})")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.error_scale <= 0:
            raise ValueError("error_scale must be positive")

    def scenario(self) -> dict:
        return {k: getattr(self, k) for k in SCENARIO_FIELDS}


@dataclass(frozen=True)
class SimTruth:
    true_effects: np.ndarray
    true_partition: np.ndarray
    gamma: np.ndarray
    predictive: tuple[str, ...]
    prognostic: tuple[str, ...]


def effect_chain(delta_beta: float, p: int, qualitative: bool) -> np.ndarray:
    """Treatment effects of the p+1 true subgroups."""
    if p == 0:
        return np.array([0.5])
    first = -0.75 * delta_beta if qualitative else 0.5
    return first + delta_beta * np.arange(p + 1)


def _sigma_root(m: int) -> np.ndarray:
    sigma = np.full((m, m), 0.2)
    np.fill_diagonal(sigma, 1.0)
    evals, evecs = np.linalg.eigh(sigma)
    return (evecs * np.sqrt(evals)) @ evecs.T


def gen_dataset(cfg: SimConfig) -> tuple[Dataset, SimTruth]:
    rng = np.random.default_rng(cfg.seed)
    xa = rng.integers(0, 2, cfg.n).astype(float)
    Z = rng.standard_normal((cfg.n, cfg.m)) @ _sigma_root(cfg.m)
    u = rng.standard_normal(cfg.n) * np.sqrt(cfg.error_scale)

    # subgroup b+1 when the first b predictive factors are > 0 and the next is <= 0
    group = np.zeros(cfg.n, dtype=np.int64)
    alive = np.ones(cfg.n, dtype=bool)
    for j in range(cfg.p):
        stop = alive & (Z[:, j] <= 0)
        group[stop] = j
        alive &= ~stop
    group[alive] = cfg.p
    effects = effect_chain(cfg.delta_beta, cfg.p, cfg.qualitative)[group]

    gamma = np.ones(cfg.q)
    xf = Z[:, cfg.p:cfg.p + cfg.q]
    y = xa * effects + xf @ gamma + u

    znames = [f"z{j + 1}" for j in range(cfg.m)]
    cols = [numeric("y", y), numeric("xa", xa)] + [numeric(name, Z[:, j]) for j, name in enumerate(znames)]
    truth = SimTruth(
        true_effects=effects,
        true_partition=group + 1,
        gamma=gamma,
        predictive=tuple(znames[:cfg.p]),
        prognostic=tuple(znames[cfg.p:cfg.p + cfg.q]),
    )
    return Dataset.from_columns(cols), truth


def method_spec(method: str, ds: Dataset, truth: SimTruth) -> RoleSpec:
    zs = tuple(name for name in ds.names if name.startswith("z"))
    if method == "palm":
        return RoleSpec("y", ("xa",), truth.prognostic, zs, allow_overlap=True)
    if method == "lmtree1":
        return RoleSpec("y", ("xa",), (), zs)
    if method == "lmtree2":
        return RoleSpec("y", ("xa",) + truth.prognostic, (), zs, allow_overlap=True)
    if method == "otr":
        return RoleSpec("y", ("xa",), truth.prognostic, zs, allow_overlap=True)
    raise ValueError(f"unknown method {method!r}")


def run_method(method: str, ds: Dataset, truth: SimTruth, seed: int = 0) -> dict:
    """Fit one method and compute its evaluation metrics."""
    spec = method_spec(method, ds, truth)
    t0 = time.perf_counter()
    converged = True
    if method == "otr":
        model = fit_otr(ds, spec, "xa", seed=seed)
        elapsed = time.perf_counter() - t0
        part = model.tree.apply(ds)
        est = otr_regime(model.tree, ds).astype(float)
        mae = float("nan")
    else:
        if method == "palm":
            model = fit_palm(ds, spec, PalmControl())
            converged = model.converged
            tree = model.tree
        else:
            model = tree = grow_tree(ds, spec, TreeControl())
        elapsed = time.perf_counter() - t0
        part = tree.train_leaf
        est = treatment_effects(model, ds, "xa")
        mae = treatment_mae(est, truth.true_effects)
    return {
        "n_subgroups": int(model.n_leaves),
        "ari": adjusted_rand_index(part, truth.true_partition),
        "regime_accuracy": regime_accuracy(est, truth.true_effects),
        "mae": mae,
        "seconds": elapsed,
        "converged": converged,
    }


def replication_seed(master: int, scenario: dict, rep: int) -> int:
    """Independent 63-bit seed for a (scenario, replication) pair."""
    key = repr(tuple((k, scenario[k]) for k in SCENARIO_FIELDS)).encode()
    digest = int.from_bytes(hashlib.sha256(key).digest()[:4], "little")
    ss = np.random.SeedSequence(master, spawn_key=(digest, rep))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def run_replication(task) -> list[dict]:
    scenario, rep, methods, master, error_scale = task
    seed = replication_seed(master, scenario, rep)
    cfg = SimConfig(**scenario, error_scale=error_scale, seed=seed)
    ds, truth = gen_dataset(cfg)
    rows = []
    for method in methods:
        row = {**scenario, "rep": rep, "seed": seed, "method": method}
        try:
            row.update(run_method(method, ds, truth, seed=seed % (2**32)))
            row["error"] = ""
        except Exception as exc:  # noqa: BLE001 - failures are recorded, not raised
            row.update(n_subgroups=np.nan, ari=np.nan, regime_accuracy=np.nan, mae=np.nan,
                       seconds=np.nan, converged=False, error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    return rows


def star_scenarios() -> list[dict]:
    """Default scenario plus one-at-a-time variations (deduplicated)."""
    base = SimConfig().scenario()
    grid = {"delta_beta": DELTA_BETAS, "n": NS, "qualitative": QUALITATIVE, "m": MS, "p": PS, "q": QS}
    out = [base]
    for key, values in grid.items():
        for v in values:
            sc = {**base, key: v}
            if sc not in out:
                out.append(sc)
    return out


def type1_scenarios(ns: Sequence[int] = NS) -> list[dict]:
    base = SimConfig().scenario()
    return [{**base, "p": 0, "n": n} for n in ns]


def factorial_scenarios(fraction: float | None = None, seed: int = 0) -> list[dict]:
    grid = [
        dict(zip(SCENARIO_FIELDS, combo))
        for combo in itertools.product(DELTA_BETAS, NS, QUALITATIVE, MS, PS, QS)
    ]
    if fraction is None or fraction >= 1:
        return grid
    rng = np.random.default_rng(seed)
    k = max(1, int(round(fraction * len(grid))))
    pick = np.sort(rng.choice(len(grid), size=k, replace=False))
    return [grid[i] for i in pick]


def run_design(
    scenarios: Iterable[dict],
    reps: int,
    methods: Sequence[str] = METHODS,
    jobs: int = 1,
    seed: int = 1,
    error_scale: float = 1.5,
    progress: Callable[[int, int], None] | None = None,
) -> pd.DataFrame:
    """Run every (scenario, replication) and return the raw per-method rows,
    sorted by scenario order, replication and method order."""
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    scenarios = list(scenarios)
    tasks = [(sc, r, tuple(methods), seed, error_scale) for sc in scenarios for r in range(reps)]
    rows: list[dict] = []
    if jobs <= 1:
        for i, t in enumerate(tasks):
            rows.extend(run_replication(t))
            if progress:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for i, res in enumerate(pool.map(run_replication, tasks, chunksize=max(1, len(tasks) // (8 * jobs)))):
                rows.extend(res)
                if progress:
                    progress(i + 1, len(tasks))
    raw = pd.DataFrame(rows)
    order = {repr(tuple(sc[k] for k in SCENARIO_FIELDS)): i for i, sc in enumerate(scenarios)}
    raw["_sc"] = [order[repr(tuple(r[k] for k in SCENARIO_FIELDS))] for r in rows]
    raw["_m"] = [methods.index(m) for m in raw["method"]]
    raw = raw.sort_values(["_sc", "rep", "_m"], kind="mergesort").drop(columns=["_sc", "_m"])
    return raw.reset_index(drop=True)


def _se(x):
    x = x.dropna()
    return float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else float("nan")


def aggregate(raw: pd.DataFrame, by: Sequence[str] = SCENARIO_FIELDS) -> pd.DataFrame:
    """Means, standard errors and counts per group and method.

    Failed replications are excluded from the means and counted in
    ``failures``; groups where every replication failed keep a row with
    ``reps_ok = 0``.
    """
    keys = list(by) + ["method"]
    metrics = ["n_subgroups", "ari", "regime_accuracy", "mae", "seconds"]
    data = raw.copy()
    data["_ok"] = data["error"] == ""
    data["split"] = np.where(data["_ok"], (data["n_subgroups"] > 1).astype(float), np.nan)
    for m in metrics:
        data.loc[~data["_ok"], m] = np.nan
    g = data.groupby(keys, sort=False)
    out = pd.concat([g[metrics].mean().add_prefix("mean_"), g[metrics].agg(_se).add_prefix("se_")], axis=1)
    out["rejection_rate"] = g["split"].mean()
    out["reps_ok"] = g["_ok"].sum().astype(int)
    out["failures"] = (g.size() - out["reps_ok"]).astype(int)
    out = out.reset_index()
    out.loc[out["method"] == "otr", ["mean_mae", "se_mae"]] = np.nan
    return out


def timing_quantiles(raw: pd.DataFrame) -> pd.DataFrame:
    ok = raw[raw["error"] == ""]
    if ok.empty:
        return pd.DataFrame(columns=["method", "q0", "q25", "q50", "q75", "q100"])
    q = ok.groupby("method", sort=False)["seconds"].quantile([0, 0.25, 0.5, 0.75, 1.0]).unstack()
    q.columns = ["q0", "q25", "q50", "q75", "q100"]
    return q.reset_index()


def write_outputs(raw: pd.DataFrame, out_dir: str | Path, marginal_by: Sequence[str] | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"raw": out / "raw.csv", "aggregate": out / "aggregate.csv", "timing": out / "timing.csv"}
    raw_out = raw.copy()
    raw_out.loc[raw_out["method"] == "otr", "mae"] = np.nan
    raw_out.to_csv(paths["raw"], index=False, float_format="%.10g")
    aggregate(raw).to_csv(paths["aggregate"], index=False, float_format="%.10g")
    timing_quantiles(raw).to_csv(paths["timing"], index=False, float_format="%.6g")
    if marginal_by:
        paths["marginal"] = out / "marginal.csv"
        aggregate(raw, marginal_by).to_csv(paths["marginal"], index=False, float_format="%.10g")
    return paths


def run_star_design(reps: int, methods=METHODS, jobs: int = 1, out_dir=None, seed: int = 1, **kw) -> pd.DataFrame:
    raw = run_design(star_scenarios(), reps, methods, jobs, seed, **kw)
    if out_dir is not None:
        write_outputs(raw, out_dir)
    return aggregate(raw)


def run_type1_design(reps: int, methods=METHODS, jobs: int = 1, out_dir=None, seed: int = 1,
                     ns: Sequence[int] = NS, **kw) -> pd.DataFrame:
    raw = run_design(type1_scenarios(ns), reps, methods, jobs, seed, **kw)
    if out_dir is not None:
        write_outputs(raw, out_dir)
    return aggregate(raw)


def run_full_factorial(reps: int = 1, subsample: float | None = None, subsample_seed: int = 0,
                       methods=METHODS, jobs: int = 1, out_dir=None, seed: int = 1, **kw) -> pd.DataFrame:
    raw = run_design(factorial_scenarios(subsample, subsample_seed), reps, methods, jobs, seed, **kw)
    if out_dir is not None:
        write_outputs(raw, out_dir, marginal_by=("p", "delta_beta", "n", "qualitative"))
    return aggregate(raw, ("p", "delta_beta", "n", "qualitative"))
