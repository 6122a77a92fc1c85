"""Model zoo built from trained networks: bags, depth mixtures and selection."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import core
from .errors import ConfigError, EmptyEnsemble, MlrError, TrainingError
from .training import TrainRecord, train

logger = logging.getLogger(__name__)

KINDS = ("single", "bag", "ens", "best", "top5")
BAG_SIZE = 10
TOP_K = 5


@dataclass(frozen=True)
class EnsembleSpec:
    """Which networks to train and how to combine them.

    ``depths`` lists one depth per member. Use the constructors below
    rather than building member lists by hand.
    """
    kind: str
    depths: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown ensemble kind {self.kind!r}")
        if not self.depths:
            raise ConfigError("an ensemble needs at least one member")
        for L in self.depths:
            if L not in core.DEPTH_TABLE:
                raise ConfigError(f"depth must be one of 1, 2, 3, 4, got {L}")

    @classmethod
    def single(cls, depth: int = 2) -> "EnsembleSpec":
        return cls("single", (depth,))

    @classmethod
    def bag(cls, depth: int, members: int = BAG_SIZE) -> "EnsembleSpec":
        return cls("bag", (depth,) * members)

    @classmethod
    def pool(cls, kind: str = "ens") -> "EnsembleSpec":
        """The 20-network pool: ten of depth 1 followed by ten of depth 2."""
        return cls(kind, (1,) * BAG_SIZE + (2,) * BAG_SIZE)

    @classmethod
    def parse(cls, name: str, depth: int = 2) -> "EnsembleSpec":
        """Map a CLI name (single, bag1, bag2, ens, best, top5) to a spec."""
        if name == "single":
            return cls.single(depth)
        if name in ("bag1", "bag2"):
            return cls.bag(int(name[-1]))
        if name == "bag":
            return cls.bag(depth)
        if name in ("ens", "best", "top5"):
            return cls.pool(name)
        raise ConfigError(f"unknown ensemble {name!r}; expected single, bag1, bag2, ens, best or top5")

    @property
    def size(self) -> int:
        return len(self.depths)


@dataclass
class Member:
    index: int
    seed: int
    depth: int
    model: Optional[core.TrainedModel] = None
    record: Optional[TrainRecord] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.model is not None

    @property
    def val_score(self) -> float:
        return self.record.best_val_score if self.record is not None else -np.inf


@dataclass
class Ensemble:
    spec: EnsembleSpec
    members: list = field(default_factory=list)

    @property
    def trained(self) -> list:
        return [m for m in self.members if m.ok]

    def predict_raw(self, x) -> np.ndarray:
        return ensemble_predict(self.trained, x, self.spec.kind, output="raw")

    def predict(self, x) -> np.ndarray:
        return ensemble_predict(self.trained, x, self.spec.kind)

    def predict_proba(self, x) -> np.ndarray:
        return ensemble_predict(self.trained, x, self.spec.kind, output="proba")


def _train_member(args):
    index, seed, config, x, y = args
    try:
        model, record = train(config, x, y, seed=seed)
        return Member(index, seed, config.depth, model, record)
    except MlrError as exc:
        return Member(index, seed, config.depth, error=f"{type(exc).__name__}: {exc}")


def train_ensemble(spec: EnsembleSpec, config: core.MlrConfig, x, y, master_seed: int = 0,
                   workers: int = 1) -> Ensemble:
    """Train every member with seed master_seed + i and its own validation split.

    Members are independent, so ``workers > 1`` trains them in a process
    pool; results are ordered by member index regardless of completion order.
    Raises TrainingError when more than half of the members fail.
    """
    jobs = [(i, master_seed + i, config.with_(depth=L), x, y) for i, L in enumerate(spec.depths)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            members = list(pool.map(_train_member, jobs))
    else:
        members = [_train_member(job) for job in jobs]
    members.sort(key=lambda m: m.index)
    failed = [m for m in members if not m.ok]
    for m in failed:
        logger.warning("member %d (seed %d) failed: %s", m.index, m.seed, m.error)
    if 2 * len(failed) > len(members):
        raise TrainingError(f"{len(failed)} of {len(members)} ensemble members failed; "
                            f"first error: {failed[0].error}")
    return Ensemble(spec, members)


def select_members(members: list, kind: str) -> list:
    """Members that take part in the prediction for ``kind``.

    best picks the highest validation score (ties to the lowest index);
    top5 keeps the five highest, ties again favouring lower indices.
    """
    if not members:
        raise EmptyEnsemble("no trained members to aggregate")
    if kind in ("single", "bag", "ens"):
        return list(members)
    order = sorted(range(len(members)), key=lambda i: (-members[i].val_score, i))
    if kind == "best":
        return [members[order[0]]]
    if kind == "top5":
        return [members[i] for i in sorted(order[:TOP_K])]
    raise ConfigError(f"unknown ensemble kind {kind!r}")


def ensemble_predict(members: list, x, kind: str = "bag", output: str = "predict") -> np.ndarray:
    """Aggregate member predictions.

    Regression averages raw predictions. Classification averages logistic
    probabilities and thresholds the mean at 0.5. ``output`` selects
    "predict" (values or labels), "proba" (mean probability) or "raw"
    (mean raw score).
    """
    chosen = select_members(members, kind)
    models = [m.model if isinstance(m, Member) else m for m in chosen]
    task = models[0].task
    if output == "raw":
        return np.mean([m.raw(x) for m in models], axis=0)
    if task == "reg":
        if output == "proba":
            raise ValueError("probabilities are only defined for classification")
        return np.mean([m.raw(x) for m in models], axis=0)
    proba = np.mean([m.predict_proba(x) for m in models], axis=0)
    if output == "proba":
        return proba
    return (proba > 0.5).astype(np.int64)
