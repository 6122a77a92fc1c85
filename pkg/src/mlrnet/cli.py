"""Command-line entry point: train, predict, ablate, sweep, bench.

Exit codes: 0 success, 2 data error, 3 training error, 4 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench, core, data, modelio
from .ensemble import EnsembleSpec, select_members, train_ensemble
from .errors import ConfigError, EmptyTable, MlrError
from .metrics import accuracy, auc_score, r2_score, rmse

logger = logging.getLogger("mlrnet")

ENSEMBLES = ("single", "bag1", "bag2", "ens", "best", "top5")


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 4), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--task", choices=("reg", "clf"), help="default: schema task, else reg")
    g.add_argument("--depth", type=int, default=2, help="network depth L in 1..4 (default 2)")
    g.add_argument("--width", type=int, default=core.DEFAULT_WIDTH)
    g.add_argument("--permutations", type=int, default=core.DEFAULT_PERMUTATIONS)
    g.add_argument("--sigma-struct", type=float, default=1.0)
    g.add_argument("--label-dither", type=float, default=None,
                   help="default 0.03 for regression, always 0 for classification")
    g.add_argument("--batch-size", type=int, default=None, help="default min(n, width)")
    g.add_argument("--max-iter", type=int, default=None, help="default from the depth table")
    g.add_argument("--budget-seconds", type=float, default=300.0)
    g.add_argument("--deterministic", action="store_true",
                   help="disable the wall-clock budget so reruns are bit-identical")
    g.add_argument("--seed", type=int, default=None, help="default: $MLR_SEED, else 0")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlrnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on a CSV file and score a held-out 20%% split")
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--ensemble", choices=ENSEMBLES, default="single")
    _add_model_flags(p)

    p = sub.add_parser("predict", help="predict with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")

    p = sub.add_parser("ablate", help="ablation of the loss ingredients, single and bagged")
    p.add_argument("--data", action="append", help="regression CSV (repeatable); default: synthetic trio")
    p.add_argument("--schema")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--bag-size", type=int, default=10)
    _add_model_flags(p)

    p = sub.add_parser("sweep", help="vary one hyperparameter")
    p.add_argument("--param", required=True, choices=sorted(bench.SWEEP_PARAMS))
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--data", action="append", help="CSV (repeatable); default: synthetic trio")
    p.add_argument("--schema")
    p.add_argument("--repeats", type=int, default=5)
    _add_model_flags(p)

    p = sub.add_parser("bench", help="model zoo over repeated 80:20 splits")
    p.add_argument("--data", action="append", required=True, help="CSV (repeatable)")
    p.add_argument("--schema")
    p.add_argument("--methods", default=",".join(bench.BENCH_METHODS))
    p.add_argument("--splits", type=int, default=10)
    _add_model_flags(p)
    return parser


def resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get("MLR_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"MLR_SEED must be an integer, got {env!r}") from exc


def resolve_config(args, task: str) -> core.MlrConfig:
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    return core.MlrConfig(
        task=task, depth=args.depth, width=args.width, n_permutations=args.permutations,
        sigma_struct=args.sigma_struct, label_dither=args.label_dither,
        max_iter=args.max_iter, batch_size=args.batch_size,
        budget_seconds=None if args.deterministic else args.budget_seconds,
    )


def _echo(out: Path, doc: dict) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True, default=str)
    print(text)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(text + "\n")


def _load(path, schema_path, task_flag):
    schema = data.load_schema(schema_path) if schema_path else {}
    raw = data.load_csv(path, schema)
    task = task_flag or schema.get("task") or "reg"
    if task not in ("reg", "clf"):
        raise ConfigError(f"schema task must be 'reg' or 'clf', got {task!r}")
    return raw, task


def _scores(task, y, ens_or_saved, x) -> dict:
    pred = ens_or_saved.predict(x)
    if task == "clf":
        out = {"accuracy": accuracy(y, pred)}
        try:
            out["auc"] = auc_score(y, ens_or_saved.predict_proba(x))
        except MlrError:
            pass
        return out
    return {"r2": r2_score(y, pred), "rmse": rmse(y, pred)}


def cmd_train(args) -> int:
    raw, task = _load(args.data, args.schema, args.task)
    seed = resolve_seed(args.seed)
    config = resolve_config(args, task)
    spec = EnsembleSpec.parse(args.ensemble, config.depth)
    out = Path(args.out or "runs/train")
    _echo(out, {"command": "train", "data": str(args.data), "schema": args.schema,
                "ensemble": args.ensemble, "members": list(spec.depths), "seed": seed,
                "deterministic": args.deterministic, "config": asdict(config)})
    train, test = data.train_test_split(raw, task, seed=seed)
    ens = train_ensemble(spec, config, train.x, train.y, master_seed=seed, workers=args.workers)
    kept = select_members(ens.trained, spec.kind)
    models = [m.model for m in kept]
    saved = modelio.SavedModel(models, train.transform, spec.kind)
    modelio.save_model(out / "model.mlr", models, train.transform, spec.kind,
                       meta={"seed": seed, "members": [m.index for m in kept]})
    report = {
        "seed": seed, "n_train": train.n, "n_test": test.n, "d": train.d,
        "dropped_columns": train.transform.dropped,
        "test": _scores(task, test.y, saved, test.x),
        "members": [{"index": m.index, "seed": m.seed, "depth": m.depth,
                     "best_iter": m.record.best_iter, "val_score": m.record.best_val_score,
                     "lambda_init": m.record.lambda_init, "failure": m.record.failure}
                    for m in ens.trained],
        "failed_members": [{"index": m.index, "error": m.error} for m in ens.members if not m.ok],
    }
    if not args.deterministic:
        report["wall_time"] = [m.record.wall_time for m in ens.trained]
    (out / "metrics.report").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    # in-process predictions for every input row, for round-trip checks against predict
    _write_predictions(out / "train_predictions.csv", saved,
                       train.transform.transform_features(raw), train.transform)
    print(json.dumps(report["test"], sort_keys=True))
    return 0


def _write_predictions(path, saved: modelio.SavedModel, x, transform) -> None:
    if saved.task == "clf":
        proba = saved.predict_proba(x)
        labels = transform.inverse_target((proba > 0.5).astype(int))
        rows = [[lab, repr(float(p))] for lab, p in zip(labels, proba)]
        header = ["label", "probability"]
    else:
        values = transform.inverse_target(saved.raw(x))
        rows = [[repr(float(v))] for v in values]
        header = ["prediction"]
    if path is None:
        w = csv.writer(sys.stdout)
        w.writerow(header)
        w.writerows(rows)
    else:
        data.write_csv(path, header, rows)


def cmd_predict(args) -> int:
    saved = modelio.load_model(args.model)
    schema = data.load_schema(args.schema) if args.schema else {}
    header, body = data.read_rows(args.data)
    if not body:
        raise EmptyTable(f"{args.data} has a header but no data rows")
    target = saved.transform.target
    cells = {h: [r[j] for r in body] for j, h in enumerate(header)}
    if target not in cells:
        cells[target] = [None] * len(body)
        header = header + [target]
    kinds = dict(saved.transform.kinds)
    kinds.update(schema.get("kinds", {}))
    raw = data.RawTable(header, cells, {h: kinds.get(h, "numeric") for h in header if h != target}, target)
    x = saved.encode(raw)
    _write_predictions(Path(args.out) if args.out else None, saved, x, saved.transform)
    return 0


def _datasets(args, default_task="reg"):
    if not args.data:
        return None, default_task
    tables, task = {}, None
    for path in args.data:
        raw, t = _load(path, args.schema, args.task)
        tables[Path(path).stem] = raw
        task = task or t
    return tables, task


def _finish(report, out: Path, seed: int) -> int:
    bench.write_reports(report, out, seed)
    print(bench.format_table(report))
    if report.failures:
        logger.warning("%d cell(s) failed; see the .report files", len(report.failures))
    return 0


def cmd_ablate(args) -> int:
    seed = resolve_seed(args.seed)
    tables, task = _datasets(args)
    if task != "reg":
        raise ConfigError("the ablation study is defined for regression only")
    tables = tables or bench.synthetic_suite(seed)
    config = resolve_config(args, "reg")
    out = Path(args.out or "runs/ablate")
    _echo(out, {"command": "ablate", "datasets": list(tables), "repeats": args.repeats,
                "bag_size": args.bag_size, "seed": seed, "config": asdict(config)})
    report = bench.run_ablation(tables, args.repeats, seed, config, args.bag_size, args.workers)
    return _finish(report, out, seed)


def cmd_sweep(args) -> int:
    seed = resolve_seed(args.seed)
    grid = bench.parse_grid(args.param, args.grid)
    tables, task = _datasets(args)
    tables = tables or bench.synthetic_suite(seed)
    config = resolve_config(args, task)
    out = Path(args.out or f"runs/sweep_{args.param}")
    _echo(out, {"command": "sweep", "param": args.param, "grid": grid, "datasets": list(tables),
                "repeats": args.repeats, "seed": seed, "config": asdict(config)})
    report = bench.run_sweep(args.param, grid, tables, args.repeats, seed, config, task, args.workers)
    return _finish(report, out, seed)


def cmd_bench(args) -> int:
    seed = resolve_seed(args.seed)
    tables, task = _datasets(args)
    datasets = {name: (raw, task) for name, raw in tables.items()}
    methods = [m for m in args.methods.split(",") if m]
    config = resolve_config(args, task)
    out = Path(args.out or "runs/bench")
    _echo(out, {"command": "bench", "datasets": list(datasets), "methods": methods,
                "splits": args.splits, "split_seeds": list(range(seed, seed + args.splits)),
                "seed": seed, "config": asdict(config)})
    report = bench.run_bench(datasets, methods, args.splits, seed, config, args.workers)
    bench.write_reports(report, out, seed)
    print(bench.format_table(report))
    if len(report.datasets) >= 1 and not report.failures:
        stats = bench.summary(report)
        (out / "summary.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
        print(json.dumps(stats, sort_keys=True))
    return 0


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "ablate": cmd_ablate,
            "sweep": cmd_sweep, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return COMMANDS[args.command](args)
    except MlrError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
