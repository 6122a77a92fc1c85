"""Adam training loop with validation split and best-iteration checkpointing."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ad
from . import core
from .errors import NonFiniteGradient, NotPositiveDefinite, TooFewSamples, TrainingError
from .metrics import accuracy, r2_score

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns (new_params, new_state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** step)
        v_hat = v[name] / (1 - b2 ** step)
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return new_params, AdamState(m, v, step, b1, b2, state.eps)


def split_validation(n: int, fraction: float = 0.2, seed=None):
    """Random (train_idx, val_idx) with floor(fraction * n) >= 1 validation rows."""
    if n < 5:
        raise TooFewSamples(f"need at least 5 samples for a validation split, got {n}")
    n_val = max(1, int(math.floor(fraction * n)))
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@dataclass
class TrainRecord:
    val_scores: list = field(default_factory=list)   # index 0 = before the first update
    train_losses: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    best_iter: int = 0
    best_val_predictions: Optional[np.ndarray] = None
    lambda_init: float = float("nan")
    batch_size: int = 0
    train_idx: Optional[np.ndarray] = None
    val_idx: Optional[np.ndarray] = None
    head_rows: Optional[np.ndarray] = None   # dataset rows the final head was fitted on
    failure: Optional[str] = None
    wall_time: float = 0.0

    @property
    def n_iter(self) -> int:
        return len(self.train_losses)

    @property
    def best_val_score(self) -> float:
        return self.val_scores[self.best_iter]


def _batches(n: int, size: int, rng):
    """Endless stream of sorted index batches; each epoch is a fresh shuffle.

    Incomplete trailing batches are dropped so every batch matches the
    fixed permutation size.
    """
    while True:
        order = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            yield np.sort(order[start:start + size])


def _val_score(task, y_true, pred):
    if task == "clf":
        return accuracy(y_true, core.hardmax_label(pred))
    return r2_score(y_true, pred)


def train(config: core.MlrConfig, x, y, seed=0):
    """Train one network; returns (TrainedModel, TrainRecord).

    ``x`` and ``y`` are the preprocessed training rows (standardised
    regression target, or 0/1 labels). A validation split is carved out of
    them. The ridge head used for validation scoring and for the final model
    is fitted on the batch of that iteration (``head_rows="batch"``), which
    is the whole training split under the default batch size min(n, J);
    ``head_rows="full"`` always refits on every training row.
    """
    dtype = np.dtype(config.dtype)
    x = np.asarray(x, dtype=dtype)
    y = np.asarray(y, dtype=dtype)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"x must be n x d matching y; got {x.shape} and {y.shape}")
    split_seed, init_seed, perm_seed, loop_seed = np.random.SeedSequence(seed).spawn(4)
    tr, va = split_validation(len(y), config.val_fraction, split_seed)
    xt, yt, xv, yv = x[tr], y[tr], x[va], y[va]
    dense = config.head == "dense"
    bs = config.batch_for(len(tr))
    T = 0 if dense else config.n_permutations
    perms = core.sample_permutations(bs, T, perm_seed) if T > 0 else None
    params = core.init_weights(x.shape[1], config.width, config.depth, init_seed,
                               dtype=config.dtype, dense_head=dense)
    rng = np.random.default_rng(loop_seed)
    batches = _batches(len(tr), bs, rng)
    rec = TrainRecord(batch_size=bs, train_idx=tr, val_idx=va)
    start = time.perf_counter()

    batch = next(batches)
    if not dense:
        noise = core.structured_noise(bs, T, config.sigma_struct, rng)
        targets = core.label_dither(yt[batch], perms, config.dither, rng)
        if config.lambda_init is not None:
            lam0 = config.lambda_init
        else:
            try:
                # structured noise is left out so the starting penalty does not depend on sigma
                lam0 = core.init_lambda(params, xt[batch], yt[batch], perms, None, config, targets).value
            except NotPositiveDefinite as exc:
                raise TrainingError(f"ridge initialisation failed: {exc}") from exc
        params.log_lambda = math.log(lam0)
        rec.lambda_init = lam0

    full_rows = np.arange(len(tr))

    def evaluate(p: core.ModelParams, rows):
        rows = full_rows if config.head_rows == "full" else rows
        w = core.output_weights(p, xt[rows], yt[rows], config.task, config.ridge_form)
        pred = core.forward_hidden(p, xv) @ w
        return _val_score(config.task, yv, pred), pred

    try:
        score, pred = evaluate(params, batch)
    except NotPositiveDefinite as exc:
        raise TrainingError(f"initial ridge head failed: {exc}") from exc
    rec.val_scores.append(score)
    rec.lambdas.append(params.lam)
    rec.timestamps.append(time.perf_counter() - start)
    rec.best_val_predictions = pred
    best, best_rows = params.copy(), batch
    arrays = params.as_dict()
    state = AdamState.zeros_like(arrays)

    for it in range(1, config.iterations + 1):
        if it > 1:
            batch = next(batches)
        try:
            tape = ad.Tape()
            pvars = {k: tape.param(v, k) for k, v in arrays.items()}
            A = core.forward_hidden_taped(pvars, xt[batch])
            if dense:
                targets = core.label_dither(yt[batch], None, config.dither, rng)
                loss = core.dense_mse_loss(A, pvars["out"], targets)
            else:
                noise = core.structured_noise(bs, T, config.sigma_struct, rng)
                targets = core.label_dither(yt[batch], perms, config.dither, rng)
                loss = core.task_loss(config, A, ad.exp(pvars["log_lambda"]), yt[batch],
                                      perms, noise, targets)
            loss_value = float(loss.value)
            if not math.isfinite(loss_value):
                raise NonFiniteGradient("non-finite training loss")
            grads = ad.backward(tape, loss)
            arrays, state = adam_step(arrays, grads, state, config.lr)
            params = core.ModelParams.from_dict(arrays)
            score, pred = evaluate(params, batch)
        except (NotPositiveDefinite, NonFiniteGradient, FloatingPointError, core.DegenerateClass) as exc:
            rec.failure = f"iteration {it}: {exc}"
            logger.info("training stopped early at %s", rec.failure)
            break
        if not math.isfinite(score):
            score = -math.inf
        rec.train_losses.append(loss_value)
        rec.val_scores.append(score)
        rec.lambdas.append(params.lam)
        elapsed = time.perf_counter() - start
        rec.timestamps.append(elapsed)
        if score > rec.val_scores[rec.best_iter]:
            rec.best_iter = it
            rec.best_val_predictions = pred
            best, best_rows = params.copy(), batch
        if config.budget_seconds is not None and elapsed >= config.budget_seconds:
            break

    rows = full_rows if config.head_rows == "full" else best_rows
    model = core.finalize(best, xt[rows], yt[rows], config.task, config)
    rec.head_rows = tr[rows]
    rec.wall_time = time.perf_counter() - start
    return model, rec
