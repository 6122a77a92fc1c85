"""Scores and cross-dataset aggregate statistics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeMismatch, SingleClass, ZeroVariance


def _pair(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=float).ravel()
    y_pred = np.asarray(y_pred, dtype=float).ravel()
    if y_true.shape != y_pred.shape:
        raise ShapeMismatch(f"{y_true.shape} vs {y_pred.shape}")
    return y_true, y_pred


def r2_score(y_true, y_pred) -> float:
    y_true, y_pred = _pair(y_true, y_pred)
    if len(y_true) < 2:
        raise ZeroVariance("R^2 needs at least two samples")
    ss_tot = np.sum((y_true - y_true.mean()) ** 2)
    if ss_tot == 0:
        raise ZeroVariance("target has zero variance")
    return float(1.0 - np.sum((y_true - y_pred) ** 2) / ss_tot)


def rmse(y_true, y_pred) -> float:
    y_true, y_pred = _pair(y_true, y_pred)
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = _pair(y_true, y_pred)
    return float(np.mean(y_true == y_pred))


def bce(y_true, logits) -> float:
    """Binary cross-entropy of 0/1 labels against logits."""
    y_true, logits = _pair(y_true, logits)
    return float(np.mean(np.logaddexp(0.0, logits) - y_true * logits))


def auc_score(y_true, scores) -> float:
    """ROC AUC by rank summation (Mann-Whitney U), ties counted 1/2."""
    y_true, scores = _pair(y_true, scores)
    pos = y_true == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ScoreTable:
    """Mean (and std) score per dataset (rows) and method (columns)."""
    datasets: list
    methods: list
    mean: np.ndarray
    std: np.ndarray = None
    n_splits: int = 1
    higher_is_better: bool = True
    excluded: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        if self.mean.shape != (len(self.datasets), len(self.methods)):
            raise ShapeMismatch(
                f"table is {self.mean.shape}, expected {(len(self.datasets), len(self.methods))}")
        if self.std is None:
            self.std = np.zeros_like(self.mean)

    @classmethod
    def from_scores(cls, scores: dict, datasets=None, methods=None) -> "ScoreTable":
        """Build from {(dataset, method): [score per split]}; every cell needs the same split count."""
        datasets = datasets or sorted({k[0] for k in scores})
        methods = methods or sorted({k[1] for k in scores})
        counts = {len(v) for v in scores.values()}
        if len(counts) != 1:
            raise ShapeMismatch(f"cells have differing split counts {sorted(counts)}")
        mean = np.array([[np.mean(scores[d, m]) for m in methods] for d in datasets])
        std = np.array([[np.std(scores[d, m]) for m in methods] for d in datasets])
        return cls(list(datasets), list(methods), mean, std, counts.pop())


def friedman_rank(table: ScoreTable) -> dict:
    """Mean per-dataset rank of each method; rank 1 is best, ties get the average rank."""
    if len(table.methods) < 2:
        raise ValueError("Friedman rank needs at least two methods")
    signed = -table.mean if table.higher_is_better else table.mean
    ranks = np.vstack([rankdata(row) for row in signed])
    return dict(zip(table.methods, ranks.mean(axis=0).tolist()))


def p_at(table: ScoreTable, threshold: float) -> dict:
    """Fraction of datasets where a method reaches ``threshold`` x the best score.

    The cut-off is best - (1 - threshold) * |best|, which equals threshold * best
    for positive maxima and stays monotone in the threshold when the best is negative.
    """
    best = table.mean.max(axis=1, keepdims=True)
    hits = table.mean >= best - (1.0 - threshold) * np.abs(best)
    return dict(zip(table.methods, hits.mean(axis=0).tolist()))


def pma(table: ScoreTable, exclude_nonpositive: bool = True):
    """Mean over datasets of score / per-dataset max score.

    Datasets whose best score is <= 0 are excluded by default; returns
    (per-method PMA, list of excluded datasets).
    """
    best = table.mean.max(axis=1)
    keep = best > 0 if exclude_nonpositive else np.ones_like(best, dtype=bool)
    excluded = [d for d, k in zip(table.datasets, keep) if not k]
    if not keep.any():
        return {m: float("nan") for m in table.methods}, excluded
    ratio = table.mean[keep] / best[keep, None]
    return dict(zip(table.methods, ratio.mean(axis=0).tolist())), excluded
