"""CSV ingestion, tabular preprocessing and train/test splits.

Preprocessing statistics are fitted on one set of rows (the training side
of a split by default) and frozen in a ``TransformState`` that can be
applied to any other table with the same columns:

    raw = load_csv("data.csv", schema={"target": "y"})
    train, test = train_test_split(raw, "reg", seed=0)
    train.x, train.y          # standardised features and target
    train.transform.inverse_target(train.y)
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (ConfigError, DataError, EmptyTable, IoError, NoHeader, NoUsableFeatures,
                     SchemaMismatch, SingleClassTarget, TooFewSamples)

MAX_MODALITIES = 12
STD_FLOOR = 1e-12
MISSING = "<missing>"
FEATURE_KINDS = ("numeric", "categorical")


def _parse_float(cell: Optional[str]) -> float:
    if cell is None:
        return math.nan
    try:
        value = float(cell)
    except ValueError:
        return math.nan
    return value if math.isfinite(value) else math.nan


@dataclass
class RawTable:
    """Rectangular table of optional string cells, one target column."""
    columns: list
    cells: dict            # column -> list of str, None where missing
    kinds: dict            # feature column -> "numeric" | "categorical"
    target: str
    task: Optional[str] = None

    def __post_init__(self):
        lengths = {len(v) for v in self.cells.values()}
        if len(lengths) > 1:
            raise DataError("table is not rectangular")
        if self.target not in self.cells:
            raise DataError(f"target column {self.target!r} not found")

    @property
    def n_rows(self) -> int:
        return len(self.cells[self.columns[0]]) if self.columns else 0

    @property
    def features(self) -> list:
        return [c for c in self.columns if c != self.target]

    def numeric(self, column: str) -> np.ndarray:
        return np.array([_parse_float(c) for c in self.cells[column]])

    def take(self, rows) -> "RawTable":
        rows = list(rows)
        cells = {c: [v[i] for i in rows] for c, v in self.cells.items()}
        return RawTable(list(self.columns), cells, dict(self.kinds), self.target, self.task)

    @classmethod
    def from_arrays(cls, x, y, names=None, target="y", task=None) -> "RawTable":
        """Build a numeric table from arrays (NaN becomes missing)."""
        x = np.asarray(x, dtype=float)
        names = names or [f"x{j}" for j in range(x.shape[1])]
        cells = {n: [None if math.isnan(v) else repr(float(v)) for v in x[:, j]]
                 for j, n in enumerate(names)}
        cells[target] = [None if (isinstance(v, float) and math.isnan(v)) else str(v)
                         for v in np.asarray(y).tolist()]
        return cls(list(names) + [target], cells, {n: "numeric" for n in names}, target, task)


def load_schema(path) -> dict:
    """Read a JSON schema sidecar with optional keys target, task and kinds."""
    try:
        with open(path, encoding="utf-8") as fh:
            schema = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read schema {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"schema {path} is not valid JSON: {exc}") from exc
    if not isinstance(schema, dict):
        raise DataError("schema must be a JSON object")
    for kind in schema.get("kinds", {}).values():
        if kind not in FEATURE_KINDS:
            raise DataError(f"unknown column kind {kind!r} in schema")
    return schema


def read_rows(path):
    """Header and data rows of a UTF-8 CSV file; empty strings become None."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise NoHeader(f"{path} has no header row")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise NoHeader(f"{path} has duplicate column names")
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}: row {i} has {len(r)} cells, header has {len(header)}")
    return header, [[c.strip() or None for c in r] for r in body]


def load_csv(path, schema: Optional[dict] = None, target: Optional[str] = None) -> RawTable:
    """Load a CSV table.

    A column is inferred numeric when every non-empty cell parses as a
    float, otherwise categorical; ``schema["kinds"]`` overrides the guess.
    The target defaults to the schema's ``target`` and then to the last column.
    """
    schema = dict(schema or {})
    header, body = read_rows(path)
    if not body:
        raise EmptyTable(f"{path} has a header but no data rows")
    target = target or schema.get("target") or header[-1]
    if target not in header:
        raise SchemaMismatch(f"target column {target!r} not in {path}")
    cells = {h: [r[j] for r in body] for j, h in enumerate(header)}
    hints = schema.get("kinds", {})
    unknown = set(hints) - set(header)
    if unknown:
        raise SchemaMismatch(f"schema names unknown column(s): {', '.join(sorted(unknown))}")
    kinds = {}
    for h in header:
        if h == target:
            continue
        if h in hints:
            kinds[h] = hints[h]
        else:
            present = [c for c in cells[h] if c is not None]
            numeric = all(not math.isnan(_parse_float(c)) for c in present)
            kinds[h] = "numeric" if numeric else "categorical"
    return RawTable(header, cells, kinds, target, schema.get("task"))


# fitted transform
@dataclass
class FeatureMap:
    """How one raw column becomes zero or more model columns."""
    name: str
    encoding: str                     # "numeric", "binary" or "onehot"
    mean: float = 0.0
    std: float = 1.0
    categories: list = field(default_factory=list)

    @property
    def width(self) -> int:
        return len(self.categories) if self.encoding == "onehot" else 1

    def output_names(self) -> list:
        if self.encoding == "onehot":
            return [f"{self.name}={c}" for c in self.categories]
        return [self.name]


def _category_keys(cells, numeric: bool) -> list:
    """String key per cell; numeric columns use the float's repr so 1 and 1.0 agree."""
    keys = []
    for c in cells:
        if numeric:
            v = _parse_float(c)
            keys.append(MISSING if math.isnan(v) else repr(v))
        else:
            keys.append(MISSING if c is None else c)
    return keys


def _sort_categories(values, numeric: bool) -> list:
    present = [v for v in values if v != MISSING]
    present.sort(key=float if numeric else str)
    return present + ([MISSING] if MISSING in values else [])


@dataclass
class TransformState:
    """Frozen preprocessing statistics; serialisable to plain JSON."""
    task: str
    target: str
    features: list                    # list of FeatureMap
    dropped: dict                     # column -> reason
    kinds: dict                       # raw feature kinds at fit time
    target_mean: float = 0.0
    target_std: float = 1.0
    classes: list = field(default_factory=list)   # classification: [label for 0, label for 1]

    @property
    def feature_names(self) -> list:
        return [n for f in self.features for n in f.output_names()]

    @property
    def n_features(self) -> int:
        return sum(f.width for f in self.features)

    def transform_features(self, raw: RawTable) -> np.ndarray:
        missing = [f.name for f in self.features if f.name not in raw.cells]
        if missing:
            raise SchemaMismatch(f"missing feature column(s): {', '.join(missing)}")
        blocks = []
        for f in self.features:
            cells = raw.cells[f.name]
            if f.encoding == "numeric":
                col = np.array([_parse_float(c) for c in cells])
                col = np.where(np.isnan(col), f.mean, col)
                blocks.append(((col - f.mean) / f.std)[:, None])
                continue
            keys = _category_keys(cells, self.kinds.get(f.name) == "numeric")
            if f.encoding == "binary":
                blocks.append(np.array([[1.0 if k == f.categories[1] else 0.0] for k in keys]))
            else:
                index = {c: j for j, c in enumerate(f.categories)}
                block = np.zeros((len(keys), len(f.categories)))
                for i, k in enumerate(keys):
                    if k in index:
                        block[i, index[k]] = 1.0
                blocks.append(block)
        if not blocks:
            return np.zeros((raw.n_rows, 0))
        return np.hstack(blocks)

    def transform_target(self, raw: RawTable) -> np.ndarray:
        cells = raw.cells[self.target]
        if self.task == "reg":
            return (np.array([_parse_float(c) for c in cells]) - self.target_mean) / self.target_std
        lookup = {c: float(i) for i, c in enumerate(self.classes)}
        keys = _category_keys(cells, self._numeric_classes())
        return np.array([lookup.get(k, math.nan) for k in keys])

    def _numeric_classes(self) -> bool:
        return all(not math.isnan(_parse_float(c)) for c in self.classes)

    def inverse_target(self, y) -> np.ndarray:
        """Back to original units (regression) or original labels (classification)."""
        y = np.asarray(y)
        if self.task == "reg":
            return y * self.target_std + self.target_mean
        return np.array([self.classes[int(v)] for v in y.ravel()], dtype=object)

    def to_dict(self) -> dict:
        return {
            "task": self.task, "target": self.target, "dropped": self.dropped,
            "kinds": self.kinds, "target_mean": self.target_mean,
            "target_std": self.target_std, "classes": self.classes,
            "features": [vars(f) for f in self.features],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformState":
        return cls(d["task"], d["target"], [FeatureMap(**f) for f in d["features"]],
                   dict(d["dropped"]), dict(d["kinds"]), float(d["target_mean"]),
                   float(d["target_std"]), list(d["classes"]))


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    task: str
    transform: TransformState
    rows: np.ndarray                  # indices into the source table

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def feature_names(self) -> list:
        return self.transform.feature_names


def _population_std(col: np.ndarray) -> float:
    std = float(np.sqrt(np.mean((col - col.mean()) ** 2)))
    return std if std >= STD_FLOOR else 1.0


def _labeled_rows(raw: RawTable, task: str) -> np.ndarray:
    """Rows whose target is present (and numeric, for regression)."""
    if task == "reg":
        return np.flatnonzero(~np.isnan(raw.numeric(raw.target)))
    return np.array([i for i, c in enumerate(raw.cells[raw.target]) if c is not None], dtype=np.int64)


def fit_transform(raw: RawTable, task: str, rows=None) -> TransformState:
    """Fit preprocessing statistics on ``rows`` (default: all labelled rows).

    Steps: constant columns are dropped; columns with at most 12 distinct
    values (missing counted as a value, numeric columns included) are
    categorical, encoded as one 0/1 column when there are two values and
    one-hot otherwise; categorical columns with more than 12 values are
    dropped; the remaining numeric columns are mean-imputed and
    standardised with the population std.
    """
    if task not in ("reg", "clf"):
        raise ConfigError(f"task must be 'reg' or 'clf', got {task!r}")
    labeled = set(_labeled_rows(raw, task).tolist())
    rows = sorted(labeled) if rows is None else [int(i) for i in rows if int(i) in labeled]
    if not rows:
        raise EmptyTable("no rows with a target value")
    part = raw.take(rows)
    features, dropped = [], {}
    for name in raw.features:
        numeric = raw.kinds[name] == "numeric"
        keys = _category_keys(part.cells[name], numeric)
        distinct = _sort_categories(set(keys), numeric)
        n_j = len(distinct)
        if n_j <= 1:
            dropped[name] = "constant"
        elif n_j == 2:
            features.append(FeatureMap(name, "binary", categories=distinct))
        elif n_j <= MAX_MODALITIES:
            features.append(FeatureMap(name, "onehot", categories=distinct))
        elif not numeric:
            dropped[name] = f"{n_j} modalities"
        else:
            col = part.numeric(name)
            mean = float(np.nanmean(col))
            col = np.where(np.isnan(col), mean, col)
            features.append(FeatureMap(name, "numeric", mean, _population_std(col)))
    state = TransformState(task, raw.target, features, dropped, dict(raw.kinds))
    if not features:
        raise NoUsableFeatures("no usable feature columns after preprocessing")
    if task == "reg":
        y = part.numeric(raw.target)
        state.target_mean = float(y.mean())
        state.target_std = _population_std(y)
    else:
        numeric = all(not math.isnan(_parse_float(c)) for c in part.cells[raw.target])
        classes = _sort_categories(set(_category_keys(part.cells[raw.target], numeric)), numeric)
        if len(classes) < 2:
            raise SingleClassTarget(f"target {raw.target!r} has a single class {classes}")
        if len(classes) > 2:
            raise DataError(f"target {raw.target!r} has {len(classes)} classes; only binary is supported")
        state.classes = classes
    return state


def apply_transform(raw: RawTable, state: TransformState, rows=None) -> Dataset:
    """Encode labelled ``rows`` (default: all labelled rows) with a fitted state."""
    labeled = _labeled_rows(raw, state.task)
    rows = labeled if rows is None else np.intersect1d(np.asarray(rows, dtype=np.int64), labeled)
    part = raw.take(rows)
    y = state.transform_target(part)
    keep = ~np.isnan(y)   # drops classification labels unseen at fit time
    x = state.transform_features(part)
    return Dataset(x[keep], y[keep], state.task, state, np.asarray(rows)[keep])


def preprocess(raw: RawTable, task: str) -> Dataset:
    """Fit on every labelled row and encode them."""
    state = fit_transform(raw, task)
    return apply_transform(raw, state)


def train_test_split(raw: RawTable, task: str, ratio: float = 0.8, seed=None,
                     fit_on: str = "train"):
    """Random 80:20 split of the labelled rows, no stratification.

    Statistics are fitted on the training side (``fit_on="train"``) or on
    all labelled rows (``fit_on="all"``, for replication runs) and applied
    to both sides.
    """
    if not 0 < ratio < 1:
        raise ConfigError("split ratio must lie in (0, 1)")
    if fit_on not in ("train", "all"):
        raise ConfigError(f"fit_on must be 'train' or 'all', got {fit_on!r}")
    labeled = _labeled_rows(raw, task)
    n = len(labeled)
    if n < 10:
        raise TooFewSamples(f"need at least 10 labelled rows to split, got {n}")
    n_train = int(math.floor(ratio * n + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    tr = np.sort(labeled[order[:n_train]])
    te = np.sort(labeled[order[n_train:]])
    state = fit_transform(raw, task, tr if fit_on == "train" else None)
    return apply_transform(raw, state, tr), apply_transform(raw, state, te)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
