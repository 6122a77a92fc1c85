"""Experiment runners: synthetic tasks, ablation, hyperparameter sweeps, benchmarks.

Every experiment is a set of independent cells keyed by
(dataset, method, split seed). Cells can run in a process pool; results
are merged by key so the output never depends on completion order.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import core
from .data import RawTable, train_test_split
from .ensemble import EnsembleSpec, ensemble_predict, train_ensemble
from .errors import ConfigError, MlrError
from .metrics import ScoreTable, accuracy, auc_score, friedman_rank, p_at, pma, r2_score

logger = logging.getLogger(__name__)

BAYES_R2 = 0.6
SYNTHETIC_N = 100
SYNTHETIC_D = 8


# synthetic regression tasks
def _linear(x):
    beta = np.array([1.0, -0.8, 0.6, -0.4, 0.3, 0.2, -0.1, 0.05])
    return x @ beta[:x.shape[1]]


def _additive(x):
    return np.sin(2 * x[:, 0]) + 0.5 * x[:, 1] ** 2 + np.tanh(x[:, 2]) - np.abs(x[:, 3]) + 0.5 * x[:, 4]


def _sparse(x):
    return 2.0 * x[:, 0] - 1.5 * x[:, 3]


SIGNALS = {"linear": _linear, "additive": _additive, "sparse": _sparse}


def signal_variance(name: str, d: int = SYNTHETIC_D, draws: int = 200_000) -> float:
    """Variance of the noiseless signal under x ~ N(0, I), by a fixed-seed Monte-Carlo."""
    x = np.random.default_rng(12345).standard_normal((draws, d))
    return float(np.var(SIGNALS[name](x)))


def make_synthetic(name: str, n: int = SYNTHETIC_N, d: int = SYNTHETIC_D, seed: int = 0,
                   bayes_r2: float = BAYES_R2):
    """Draw (x, y) with Gaussian features and noise sized so the Bayes R^2 is ``bayes_r2``."""
    if name not in SIGNALS:
        raise ConfigError(f"unknown synthetic task {name!r}; expected one of {sorted(SIGNALS)}")
    if not 0 < bayes_r2 < 1:
        raise ConfigError("bayes_r2 must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    noise_sd = math.sqrt(signal_variance(name, d) * (1 / bayes_r2 - 1))
    y = SIGNALS[name](x) + noise_sd * rng.standard_normal(n)
    return x, y


def synthetic_table(name: str, seed: int = 0, **kwargs) -> RawTable:
    x, y = make_synthetic(name, seed=seed, **kwargs)
    return RawTable.from_arrays(x, y, task="reg")


def synthetic_suite(seed: int = 0, **kwargs) -> dict:
    """The three desk-scale regression tasks (linear, additive, sparse)."""
    return {name: synthetic_table(name, seed=seed + i, **kwargs) for i, name in enumerate(SIGNALS)}


# cells
@dataclass
class CellResult:
    dataset: str
    method: str
    seed: int
    test_score: float = math.nan
    val_score: float = math.nan
    best_iter: float = math.nan
    n_iter: float = math.nan
    wall_time: float = math.nan
    lambda_init: float = math.nan
    test_auc: float = math.nan
    failure: Optional[str] = None

    @property
    def key(self):
        return (self.dataset, self.method, self.seed)


def _score(task: str, y, pred) -> float:
    return accuracy(y, pred) if task == "clf" else r2_score(y, pred)


def _summaries(dataset, method, seed, task, members, kind, x_test, y_test, t0):
    pred = ensemble_predict(members, x_test, kind)
    recs = [m.record for m in members]
    out = CellResult(
        dataset, method, seed,
        test_score=_score(task, y_test, pred),
        val_score=float(np.mean([r.best_val_score for r in recs])),
        best_iter=float(np.mean([r.best_iter for r in recs])),
        n_iter=float(np.mean([r.n_iter for r in recs])),
        wall_time=time.perf_counter() - t0,
        lambda_init=float(np.mean([r.lambda_init for r in recs])),
    )
    if task == "clf":
        try:
            out.test_auc = auc_score(y_test, ensemble_predict(members, x_test, kind, output="proba"))
        except MlrError:
            pass
    return out


def run_cell(job) -> list:
    """Train one ensemble on one split and score the requested views of it.

    ``job`` is (dataset name, RawTable, task, split seed, config, spec,
    views) where ``views`` maps a method name to (kind, member count); a
    member count of 1 scores member 0 alone.
    """
    name, raw, task, seed, config, spec, views = job
    t0 = time.perf_counter()
    try:
        train, test = train_test_split(raw, task, seed=seed)
        ens = train_ensemble(spec, config, train.x, train.y, master_seed=seed)
    except MlrError as exc:
        return [CellResult(name, m, seed, failure=f"{type(exc).__name__}: {exc}") for m in views]
    results = []
    for method, (kind, count) in views.items():
        members = ens.trained[:count] if count else ens.trained
        results.append(_summaries(name, method, seed, task, members, kind, test.x, test.y, t0))
    return results


def run_cells(jobs: list, workers: int = 1) -> list:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(run_cell, jobs))
    else:
        batches = [run_cell(job) for job in jobs]
    cells = [c for batch in batches for c in batch]
    return sorted(cells, key=lambda c: c.key)


# reports
@dataclass
class Report:
    """Results of one experiment: every cell plus the echoed configuration."""
    kind: str
    config: dict
    cells: list = field(default_factory=list)
    datasets: list = field(default_factory=list)
    methods: list = field(default_factory=list)

    def scores(self, metric: str = "test_score") -> dict:
        out = {}
        for c in self.cells:
            out.setdefault((c.dataset, c.method), []).append(getattr(c, metric))
        return out

    def table(self, metric: str = "test_score") -> ScoreTable:
        return ScoreTable.from_scores(self.scores(metric), self.datasets, self.methods)

    def method_mean(self, method: str, metric: str = "test_score") -> float:
        """Mean over datasets of the per-dataset mean (nan-aware)."""
        vals = [np.nanmean(v) for (d, m), v in self.scores(metric).items() if m == method]
        return float(np.mean(vals))

    def method_std(self, method: str, metric: str = "test_score") -> float:
        """Mean over datasets of the across-split std."""
        vals = [np.nanstd(v) for (d, m), v in self.scores(metric).items() if m == method]
        return float(np.mean(vals))

    @property
    def failures(self) -> list:
        return [c for c in self.cells if c.failure]


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._=-]+", "-", str(text)).strip("-") or "x"


METRICS = ("test_score", "val_score", "best_iter", "wall_time", "lambda_init", "test_auc")


def aggregate_rows(report: Report, metrics=METRICS) -> list:
    rows = []
    for d in report.datasets:
        for m in report.methods:
            cells = [c for c in report.cells if c.dataset == d and c.method == m]
            for metric in metrics:
                vals = np.array([getattr(c, metric) for c in cells], dtype=float)
                if np.all(np.isnan(vals)):
                    continue
                ok = vals[~np.isnan(vals)]
                rows.append({"dataset": d, "method": m, "metric": metric,
                             "mean": float(ok.mean()), "std": float(ok.std()), "n_splits": len(ok)})
    return rows


def format_table(report: Report, metric: str = "test_score") -> str:
    """Aligned text table of mean +- std per dataset (rows) and method (columns)."""
    scores = report.scores(metric)
    head = ["dataset"] + list(report.methods)
    body = []
    for d in report.datasets + ["overall"]:
        row = [d]
        for m in report.methods:
            if d == "overall":
                row.append(f"{report.method_mean(m, metric):.3f} +- {report.method_std(m, metric):.3f}")
            else:
                v = np.array(scores.get((d, m), [math.nan]), dtype=float)
                row.append(f"{np.nanmean(v):.3f} +- {np.nanstd(v):.3f}")
        body.append(row)
    widths = [max(len(str(r[j])) for r in [head] + body) for j in range(len(head))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [head] + body]
    return "\n".join(lines)


def write_reports(report: Report, out_dir, seed: int) -> Path:
    """Write one JSON .report per (dataset, method), aggregate.csv and table.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for d in report.datasets:
        for m in report.methods:
            cells = [c for c in report.cells if c.dataset == d and c.method == m]
            doc = {
                "experiment": report.kind, "dataset": d, "method": m, "seed": seed,
                "config": report.config,
                "split_seeds": [c.seed for c in cells],
                "splits": [asdict(c) for c in cells],
                "aggregate": [r for r in aggregate_rows(Report(report.kind, {}, cells, [d], [m]))],
            }
            path = out / f"{_slug(d)}_{_slug(m)}_{seed}.report"
            path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    with (out / "aggregate.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, ["dataset", "method", "metric", "mean", "std", "n_splits"])
        writer.writeheader()
        writer.writerows(aggregate_rows(report))
    (out / "table.txt").write_text(format_table(report) + "\n")
    return out


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


# ablation
ABLATION_VARIANTS = {
    "FFNN": dict(head="dense", n_permutations=0, sigma_struct=0.0),
    "+Ridge": dict(n_permutations=0, sigma_struct=0.0),
    "+Ridge+Struct": dict(n_permutations=0, sigma_struct=1.0),
    "+Ridge+Permut": dict(sigma_struct=0.0),
    "MLR": dict(),
}


def run_ablation(datasets: dict, repeats: int = 20, seed: int = 0,
                 config: Optional[core.MlrConfig] = None, bag_size: int = 10,
                 workers: int = 1, variants=None) -> Report:
    """Single and bagged test score of each ablation variant over ``repeats`` splits.

    ``datasets`` maps a name to a regression RawTable. Split s uses seed
    ``seed + s``; the single model of a variant is member 0 of its bag.
    """
    config = config or core.MlrConfig(depth=2)
    variants = variants or list(ABLATION_VARIANTS)
    jobs = []
    for name, raw in datasets.items():
        for s in range(repeats):
            for v in variants:
                cfg = config.with_(**ABLATION_VARIANTS[v])
                views = {v: ("bag", 1), f"Bag-{v}": ("bag", bag_size)}
                jobs.append((name, raw, "reg", seed + s, cfg, EnsembleSpec.bag(cfg.depth, bag_size), views))
    methods = [m for v in variants for m in (v, f"Bag-{v}")]
    echo = {"config": asdict(config), "repeats": repeats, "bag_size": bag_size,
            "variants": {v: ABLATION_VARIANTS[v] for v in variants}}
    return Report("ablation", echo, run_cells(jobs, workers), list(datasets), methods)


# sweeps
SWEEP_PARAMS = {
    "sigma_struct": ("sigma_struct", float),
    "T": ("n_permutations", int),
    "lambda_init": ("lambda_init", float),
    "label_dither": ("label_dither", float),
    "width": ("width", int),
    "batch_size": ("batch_size", int),
    "depth": ("depth", int),
}


def parse_grid(param: str, text: str) -> list:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; expected one of {sorted(SWEEP_PARAMS)}")
    cast = SWEEP_PARAMS[param][1]
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r} for {param}: {exc}") from exc


def run_sweep(param: str, grid, datasets: dict, repeats: int = 5, seed: int = 0,
              config: Optional[core.MlrConfig] = None, task: str = "reg", workers: int = 1) -> Report:
    """Vary one hyperparameter with everything else at its default.

    Each grid point trains one network per split; methods are named
    ``param=value`` in grid order.
    """
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; expected one of {sorted(SWEEP_PARAMS)}")
    field_name = SWEEP_PARAMS[param][0]
    config = (config or core.MlrConfig()).with_(task=task)
    jobs, methods = [], []
    for value in grid:
        method = f"{param}={value}"
        methods.append(method)
        cfg = config.with_(**{field_name: value})
        for name, raw in datasets.items():
            for s in range(repeats):
                jobs.append((name, raw, task, seed + s, cfg, EnsembleSpec.single(cfg.depth),
                             {method: ("single", 1)}))
    echo = {"config": asdict(config), "param": param, "grid": list(grid), "repeats": repeats}
    return Report("sweep", echo, run_cells(jobs, workers), list(datasets), methods)


# benchmark
BENCH_METHODS = {
    "MLR1": lambda: EnsembleSpec.single(1),
    "MLR2": lambda: EnsembleSpec.single(2),
    "Bag-MLR1": lambda: EnsembleSpec.bag(1),
    "Bag-MLR2": lambda: EnsembleSpec.bag(2),
    "Ens-MLR": lambda: EnsembleSpec.pool("ens"),
    "Best-MLR": lambda: EnsembleSpec.pool("best"),
    "Top5-MLR": lambda: EnsembleSpec.pool("top5"),
}


def run_bench(datasets: dict, methods=None, splits: int = 10, seed: int = 0,
              config: Optional[core.MlrConfig] = None, workers: int = 1) -> Report:
    """Every (dataset, method) over split seeds seed .. seed + splits - 1.

    ``datasets`` maps a name to (RawTable, task). Methods sharing the
    20-network pool (Ens, Best, Top5) reuse one trained pool per split.
    """
    methods = list(methods or BENCH_METHODS)
    unknown = [m for m in methods if m not in BENCH_METHODS]
    if unknown:
        raise ConfigError(f"unknown bench method(s) {unknown}; expected {sorted(BENCH_METHODS)}")
    config = config or core.MlrConfig()
    jobs = []
    for name, (raw, task) in datasets.items():
        cfg = config.with_(task=task)
        pool_views = {}
        for m in methods:
            spec = BENCH_METHODS[m]()
            if spec.depths == EnsembleSpec.pool().depths:
                pool_views[m] = (spec.kind, 0)
                continue
            for s in range(splits):
                jobs.append((name, raw, task, seed + s, cfg, spec, {m: (spec.kind, 0)}))
        if pool_views:
            for s in range(splits):
                jobs.append((name, raw, task, seed + s, cfg, EnsembleSpec.pool(), pool_views))
    echo = {"config": asdict(config), "methods": methods, "splits": splits,
            "split_seeds": list(range(seed, seed + splits))}
    return Report("bench", echo, run_cells(jobs, workers), list(datasets), methods)


def summary(report: Report, metric: str = "test_score") -> dict:
    """Friedman rank, P90/P95/P98 and PMA of a benchmark report."""
    table = report.table(metric)
    out = {"p90": p_at(table, 0.90), "p95": p_at(table, 0.95), "p98": p_at(table, 0.98)}
    out["pma"], out["pma_excluded"] = pma(table)
    if len(table.methods) >= 2:
        out["friedman_rank"] = friedman_rank(table)
    return out
