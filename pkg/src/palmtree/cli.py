"""Command-line interface.

Subcommands
-----------
fit        fit a PALM tree (with ``--fixed``) or an LM/GLM tree on a CSV file
predict    apply a saved model document to a CSV file
simulate   run the star, type-1 or factorial simulation designs
generate   write one simulated data set as CSV

Exit codes: 0 success, 2 input/schema error, 3 too many failed simulation
replications, 4 internal error.

Config files (``--config``) hold ``key = value`` lines using the long flag
names without dashes (``min-size = 30``); comma lists are allowed and
command-line flags take precedence. Lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import serialize
from .data import RoleSpec, SchemaError, read_csv
from .glm import DegeneratePartitionError, SingularDesignError
from .mob import TreeControl, route
from .palm import PalmControl, fit_palm, predict_palm, treatment_effects

EXIT_OK, EXIT_INPUT, EXIT_SIM, EXIT_INTERNAL = 0, 2, 3, 4
INPUT_ERRORS = (SchemaError, SingularDesignError, DegeneratePartitionError, serialize.DocumentError,
                FileNotFoundError, ValueError)

log = logging.getLogger("palmtree")


class InputError(Exception):
    pass


def _csv_list(text):
    if text is None:
        return []
    if isinstance(text, (list, tuple)):
        return list(text)
    return [t.strip() for t in str(text).split(",") if t.strip()]


def read_config(path: str | Path) -> dict[str, str]:
    out = {}
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"{path}:{i}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip().replace("_", "-")] = value.strip()
    return out


def _apply_config(args, parser, defaults_from: argparse.ArgumentParser):
    if not getattr(args, "config", None):
        return args
    cfg = read_config(args.config)
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise InputError(f"unknown config key {key!r}")
        if getattr(args, dest) in (None, False):
            action = next((a for a in defaults_from._actions if a.dest == dest), None)
            if action is not None and action.type is not None:
                value = action.type(value)
            elif action is not None and action.const is True:
                value = value.lower() in ("1", "true", "yes")
            setattr(args, dest, value)
    return args


def _fit_parser(sub):
    p = sub.add_parser("fit", help="fit a PALM tree or LM/GLM tree")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--response")
    p.add_argument("--varying", help="comma list of subgroup-varying regressors")
    p.add_argument("--fixed", help="comma list of globally fixed regressors")
    p.add_argument("--split", help="comma list of split variables")
    p.add_argument("--family", choices=("gaussian", "binomial", "poisson"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--min-size", type=int)
    p.add_argument("--trim", type=float)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--categorical", help="comma list of columns to read as categorical")
    p.add_argument("--treatment", help="binary varying column reported as treatment effect")
    p.add_argument("--allow-overlap", action="store_true", default=None)
    p.add_argument("--no-intercept", action="store_true", default=None)
    p.add_argument("--out")
    p.add_argument("--dot")
    return p


def cmd_fit(args) -> int:
    if not args.data or not args.response or not args.split:
        raise InputError("fit needs --data, --response and --split")
    spec = RoleSpec(
        args.response,
        tuple(_csv_list(args.varying)),
        tuple(_csv_list(args.fixed)),
        tuple(_csv_list(args.split)),
        args.family or "gaussian",
        intercept=not args.no_intercept,
        allow_overlap=bool(args.allow_overlap),
    )
    ds = read_csv(args.data, spec, categorical_cols=_csv_list(args.categorical))
    control = PalmControl(
        TreeControl(
            alpha=args.alpha if args.alpha is not None else 0.05,
            min_node_size=args.min_size,
            max_depth=args.max_depth if args.max_depth is not None else 10,
            trim=args.trim if args.trim is not None else 0.1,
        ),
        max_iter=args.max_iter if args.max_iter is not None else 15,
    )
    model = fit_palm(ds, spec, control)
    treatment = args.treatment
    if treatment is None and len(spec.varying) == 1:
        col = ds[spec.varying[0]]
        if not col.is_categorical and np.all(np.isin(col.values, (0, 1))):
            treatment = spec.varying[0]
    if treatment is not None and treatment not in spec.varying:
        raise InputError(f"--treatment {treatment!r} must be one of the varying columns")
    split_types = {v: "categorical" if ds[v].is_categorical else "numeric" for v in spec.split_vars}
    doc = serialize.to_document(model, treatment, split_types)
    if args.out:
        serialize.save(doc, args.out)
    if args.dot:
        Path(args.dot).write_text(serialize.to_dot(model), encoding="utf-8")
    print(f"{spec.family} {'PALM tree' if spec.fixed else 'model-based tree'}: "
          f"n = {ds.n}, {model.n_leaves} terminal node(s), log-likelihood = {model.loglik:.4f}")
    print(model.summary())
    if spec.fixed:
        print(f"iterations: {len(model.trace)}")
    if not model.converged:
        print("warning: PALM iterations did not converge; document has converged=false")
    return EXIT_OK


def cmd_predict(args) -> int:
    doc = serialize.load(args.model)
    model = serialize.from_document(doc)
    spec = model.spec
    cat_cols = [v for v, t in doc.get("split_types", {}).items() if t == "categorical"] + list(doc["levels"])
    header = ["row", "leaf_id", "mu_hat"] + (["treatment_effect"] if doc.get("treatment") else [])
    path = Path(args.data)
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    out_rows = []
    if len(lines) > 1:
        ds = read_csv(path, categorical_cols=cat_cols, levels={k: v for k, v in doc["levels"].items()})
        needed = set(spec.varying) | set(spec.fixed) | set(spec.split_vars)
        missing = sorted(n for n in needed if n not in ds)
        if missing:
            raise InputError(f"data lacks model column(s): {', '.join(missing)}")
        leaf, fallback = route(model.tree.nodes, ds)
        if fallback:
            print(f"warning: {fallback} row(s) with unseen categorical levels used the fallback route")
        mu = predict_palm(model, ds)
        cols = [np.arange(1, ds.n + 1), leaf, mu]
        if doc.get("treatment"):
            cols.append(treatment_effects(model, ds, doc["treatment"]))
        out_rows = list(zip(*cols))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in out_rows:
            w.writerow([int(r[0]), int(r[1])] + [repr(float(v)) for v in r[2:]])
    print(f"wrote {len(out_rows)} prediction(s) to {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from . import simlab

    methods = _csv_list(args.methods) or list(simlab.METHODS)
    if args.design == "star":
        scenarios = simlab.star_scenarios()
        marginal = None
    elif args.design == "type1":
        scenarios = simlab.type1_scenarios(tuple(int(v) for v in _csv_list(args.ns)) or simlab.NS)
        marginal = None
    else:
        scenarios = simlab.factorial_scenarios(args.subsample, args.subsample_seed)
        marginal = ("p", "delta_beta", "n", "qualitative")
    total = len(scenarios) * args.reps
    print(f"{args.design} design: {len(scenarios)} scenario(s) x {args.reps} rep(s), methods {','.join(methods)}, "
          f"{args.jobs} worker(s)", file=sys.stderr)
    step = max(1, total // 20)

    def progress(done, tot):
        if done % step == 0 or done == tot:
            print(f"  {done}/{tot} replications", file=sys.stderr)

    raw = simlab.run_design(scenarios, args.reps, methods, args.jobs, args.seed, args.error_scale, progress)
    paths = simlab.write_outputs(raw, args.out_dir, marginal)
    failed = int((raw["error"] != "").sum())
    for name, p in paths.items():
        print(f"{name}: {p}")
    print(simlab.timing_quantiles(raw).to_string(index=False))
    share_ok = 1 - failed / max(1, len(raw))
    if failed:
        print(f"{failed} of {len(raw)} method run(s) failed", file=sys.stderr)
    return EXIT_OK if share_ok >= 0.99 else EXIT_SIM


def cmd_generate(args) -> int:
    from .data import write_csv
    from .simlab import SimConfig, gen_dataset

    cfg = SimConfig(args.delta_beta, args.n, not args.quantitative, args.m, args.p, args.q,
                    args.error_scale, args.seed)
    ds, truth = gen_dataset(cfg)
    write_csv(ds, args.out)
    print(f"wrote {ds.n} rows to {args.out}; predictive: {','.join(truth.predictive) or '-'}; "
          f"prognostic: {','.join(truth.prognostic) or '-'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="palmtree", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _fit_parser(sub)

    p = sub.add_parser("predict", help="predict from a saved model document")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="run a simulation design")
    p.add_argument("--design", choices=("star", "factorial", "type1"), required=True)
    p.add_argument("--reps", type=int, default=2)
    p.add_argument("--methods", default="palm,lmtree1,lmtree2,otr")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out-dir", default="sim-out")
    p.add_argument("--subsample", type=float, default=None, help="factorial: fraction of scenarios")
    p.add_argument("--subsample-seed", type=int, default=0)
    p.add_argument("--ns", default=None, help="type1: comma list of sample sizes")
    p.add_argument("--error-scale", type=float, default=1.5, help="noise variance")

    p = sub.add_parser("generate", help="write one simulated data set")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--delta-beta", type=float, default=0.5)
    p.add_argument("--m", type=int, default=30)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--q", type=int, default=2)
    p.add_argument("--quantitative", action="store_true")
    p.add_argument("--error-scale", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    handlers = {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate, "generate": cmd_generate}
    try:
        if args.command == "fit":
            fit_parser = parser._subparsers._group_actions[0].choices["fit"]
            _apply_config(args, parser, fit_parser)
        return handlers[args.command](args)
    except (InputError, *INPUT_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
