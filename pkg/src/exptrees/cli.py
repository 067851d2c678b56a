"""Command-line interface.

Subcommands: gen-synth, fit-density, refit, predict, experiment. Every
failure exits nonzero after printing one machine-readable JSON line to
stderr; all randomness is controlled by --seed (or the config seed).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .data import BinningSpec, FeatureSchema, discretize, load_csv, save_csv
from .density import MixtureDensity, em_fit
from .expectation import expected_predictions_batch
from .fitting import (
    apply_forest_solution,
    build_forest_system,
    refit_tree_mse,
    solve_forest_system,
)
from .trees import ForestModel, evaluate_forest, load_forest, parse_dump, save_forest


def _load_training_table(args):
    """CSV + schema, or CSV + --max-bins discretization (writes the sidecar)."""
    if args.schema:
        schema = FeatureSchema.load(args.schema)
        return load_csv(args.train, schema), None
    if args.max_bins is None:
        raise ValueError("provide --schema or --max-bins")
    if not args.target:
        raise ValueError("--target is required with --max-bins")
    raw = load_csv(args.train)
    ds, spec = discretize(raw, args.target, args.max_bins)
    sidecar = Path(args.binning_out or (str(args.train) + ".binning.json"))
    spec.save(sidecar)
    print(f"wrote {sidecar}")
    return ds, spec


def _load_model_file(path, schema, binning):
    text = Path(path).read_text()
    obj = json.loads(text)
    if obj.get("format") == "exptree-model/1":
        return load_forest(path)
    return parse_dump(text, schema, binning)


def cmd_gen_synth(args) -> int:
    data = harness.generate_synthetic(
        n_train=args.n_train,
        n_test=args.n_test,
        n_features=args.features,
        cardinality=args.cardinality,
        components=args.components,
        separation=args.separation,
        n_trees=args.trees,
        depth=args.depth,
        noise=args.noise,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(data.train, out / "train.csv")
    save_csv(data.test, out / "test.csv")
    data.schema.save(out / "schema.json")
    data.density.save(out / "true_density.json")
    save_forest(data.model, out / "planted_model.json")
    for name in ("train.csv", "test.csv", "schema.json", "true_density.json", "planted_model.json"):
        print(f"wrote {out / name}")
    return 0


def cmd_fit_density(args) -> int:
    ds, _ = _load_training_table(args)
    model = em_fit(ds, args.k, iters=args.iters, seed=args.seed, epsilon=args.epsilon)
    model.save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_refit(args) -> int:
    schema = FeatureSchema.load(args.schema)
    binning = BinningSpec.load(args.binning) if args.binning else None
    ds = load_csv(args.train, schema)
    density = MixtureDensity.load(args.density)
    model = _load_model_file(args.model, schema, binning)
    if args.joint:
        system = build_forest_system(model, density, ds)
        solved = solve_forest_system(system, args.l2)
        refit = apply_forest_solution(model, system, solved.values)
        report = {
            "mode": "joint",
            "regularization_used": solved.regularization_used,
            "ridge_fallback": solved.ridge_fallback,
        }
    else:
        trees, reports = [], []
        for tree in model.trees:
            t, r = refit_tree_mse(tree, density, ds, args.l2)
            trees.append(t)
            reports.append(r.to_dict())
        refit = ForestModel(tuple(trees), model.omegas)
        report = {"mode": "per_tree", "trees": reports}
    save_forest(refit, args.out)
    print(f"wrote {args.out}")
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
        print(f"wrote {args.report}")
    return 0


def cmd_predict(args) -> int:
    schema = FeatureSchema.load(args.schema)
    binning = BinningSpec.load(args.binning) if args.binning else None
    model = _load_model_file(args.model, schema, binning)
    ds = load_csv(args.input, schema)
    if args.method == "expected_prediction":
        if not args.density:
            raise ValueError("expected_prediction needs --density")
        density = MixtureDensity.load(args.density)
        preds = expected_predictions_batch(model, density, ds)
    else:
        preds = np.array(
            [evaluate_forest(model, row, "default_branch") for row, _ in ds.rows()]
        )
    with open(args.out, "w") as fh:
        fh.write("prediction\n")
        for p in preds:
            fh.write(repr(float(p)) + "\n")
    print(f"wrote {args.out}")
    return 0


def cmd_experiment(args) -> int:
    cfg = harness.ExperimentConfig.load(args.config)
    overrides = {}
    if args.out:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_plot:
        overrides["plot"] = False
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    report = harness.run_experiment(cfg)
    paths = harness.emit_report(report, cfg.out_dir, plot=cfg.plot)
    for p in paths.values():
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exptrees",
        description="Expected predictions and expected-loss refitting for "
        "decision trees under missing features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic benchmark dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--features", type=int, default=8)
    p.add_argument("--cardinality", type=int, default=4)
    p.add_argument("--components", type=int, default=3)
    p.add_argument("--separation", type=float, default=0.85)
    p.add_argument("--trees", type=int, default=3)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("fit-density", help="fit the mixture density with EM")
    p.add_argument("--train", required=True)
    p.add_argument("--schema")
    p.add_argument("--target")
    p.add_argument("--max-bins", type=int, default=None)
    p.add_argument("--binning-out")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_density)

    p = sub.add_parser("refit", help="refit leaf values under expected MSE")
    p.add_argument("--model", required=True)
    p.add_argument("--density", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--binning")
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--joint", action="store_true", help="solve all trees jointly")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_refit)

    p = sub.add_parser("predict", help="predict for a CSV of (partial) rows")
    p.add_argument("--model", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--binning")
    p.add_argument("--density")
    p.add_argument("--input", required=True)
    p.add_argument(
        "--method",
        choices=["default_branch", "expected_prediction"],
        default="expected_prediction",
    )
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", help="run the MCAR benchmark from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # one machine-readable line, nonzero exit
        print(
            json.dumps({"error": type(e).__name__, "message": str(e)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
