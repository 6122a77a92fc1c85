"""MLR network: hidden stack, ridge head, permutations and losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import autograd as ad
from . import linalg
from .errors import ConfigError, DegenerateClass, NotFinalized, ShapeMismatch

# depth -> (learning rate, max iterations)
DEPTH_TABLE = {
    1: (1e-2, 200),
    2: (1e-3, 200),
    3: (10 ** -3.5, 400),
    4: (1e-4, 400),
}
DEFAULT_WIDTH = 2 ** 10
DEFAULT_PERMUTATIONS = 16
DEFAULT_LABEL_DITHER = 0.03


def lambda_grid() -> np.ndarray:
    """The 12-point ridge grid 0.1 * 10^(5k/11), k = 0..11."""
    return 0.1 * 10.0 ** (5.0 * np.arange(12) / 11.0)


@dataclass(frozen=True)
class MlrConfig:
    task: str = "reg"
    depth: int = 2
    width: int = DEFAULT_WIDTH
    n_permutations: int = DEFAULT_PERMUTATIONS
    sigma_struct: float = 1.0
    label_dither: Optional[float] = None     # None -> 0.03 (reg) / 0 (clf)
    learning_rate: Optional[float] = None    # None -> depth table
    max_iter: Optional[int] = None           # None -> depth table
    budget_seconds: Optional[float] = 300.0  # None disables the wall-clock budget
    batch_size: Optional[int] = None         # None -> min(n, width)
    val_fraction: float = 0.2
    lambda_init: Optional[float] = None      # None -> grid heuristic
    head: str = "ridge"                      # "ridge" (MLR) or "dense" (plain FFNN, MSE)
    ridge_form: str = "auto"
    head_rows: str = "batch"                 # rows the ridge head is fitted on: "batch" or "full"
    dtype: str = "float64"

    def __post_init__(self):
        if self.task not in ("reg", "clf"):
            raise ConfigError(f"task must be 'reg' or 'clf', got {self.task!r}")
        if self.depth not in DEPTH_TABLE:
            raise ConfigError(f"depth must be one of 1, 2, 3, 4, got {self.depth}")
        if self.width < 1:
            raise ConfigError("width must be >= 1")
        if self.n_permutations < 0:
            raise ConfigError("number of permutations must be >= 0")
        for name in ("sigma_struct", "label_dither", "budget_seconds"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.max_iter is not None and self.max_iter < 0:
            raise ConfigError("max_iter must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("validation fraction must lie in (0, 1)")
        if self.lambda_init is not None and self.lambda_init <= 0:
            raise ConfigError("lambda_init must be positive")
        if self.head not in ("ridge", "dense"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.head_rows not in ("batch", "full"):
            raise ConfigError(f"head_rows must be 'batch' or 'full', got {self.head_rows!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else DEPTH_TABLE[self.depth][0]

    @property
    def iterations(self) -> int:
        return self.max_iter if self.max_iter is not None else DEPTH_TABLE[self.depth][1]

    @property
    def dither(self) -> float:
        if self.task == "clf":
            return 0.0
        return DEFAULT_LABEL_DITHER if self.label_dither is None else self.label_dither

    def batch_for(self, n: int) -> int:
        return min(n, self.batch_size if self.batch_size is not None else self.width)

    def with_(self, **changes) -> "MlrConfig":
        return replace(self, **changes)


@dataclass
class ModelParams:
    """Hidden-layer weights/biases plus the log ridge penalty.

    ``weights[0]`` is d x J, the rest J x J. Depth 1 has no hidden layer,
    only the ridge penalty. With the dense head, ``out`` holds the learned
    J x 1 output layer instead.
    """
    weights: list
    biases: list
    log_lambda: float = 0.0
    out: Optional[np.ndarray] = None

    @property
    def lam(self) -> float:
        return math.exp(self.log_lambda)

    def as_dict(self) -> dict:
        arrays = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases), start=1):
            arrays[f"W{i}"] = W
            arrays[f"b{i}"] = b
        if self.out is not None:
            arrays["out"] = self.out
        else:
            arrays["log_lambda"] = np.array(self.log_lambda)
        return arrays

    @classmethod
    def from_dict(cls, arrays: dict) -> "ModelParams":
        depth = sum(1 for k in arrays if k.startswith("W"))
        return cls(
            weights=[np.array(arrays[f"W{i}"]) for i in range(1, depth + 1)],
            biases=[np.array(arrays[f"b{i}"]) for i in range(1, depth + 1)],
            log_lambda=float(arrays["log_lambda"]) if "log_lambda" in arrays else 0.0,
            out=np.array(arrays["out"]) if "out" in arrays else None,
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_dict({k: np.array(v, copy=True) for k, v in self.as_dict().items()})


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_weights(d: int, J: int, L: int, seed, dtype="float64", dense_head: bool = False) -> ModelParams:
    """Uniform Glorot initialisation, zero biases.

    The dense output layer (plain FFNN only) uses the interval
    (-sqrt(6/(d+1)), sqrt(6/(d+1))).
    """
    if L not in DEPTH_TABLE:
        raise ConfigError(f"depth must be one of 1, 2, 3, 4, got {L}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    fan_in = d
    for _ in range(L - 1):
        bound = glorot_bound(fan_in, J)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, J)).astype(dtype))
        biases.append(np.zeros(J, dtype=dtype))
        fan_in = J
    out = None
    if dense_head:
        bound = glorot_bound(d, 1)
        out = rng.uniform(-bound, bound, size=(fan_in, 1)).astype(dtype)
    return ModelParams(weights, biases, 0.0, out)


def forward_hidden(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Last hidden activation A^{L-1} (x itself at depth 1)."""
    A = np.asarray(x)
    for W, b in zip(params.weights, params.biases):
        if A.shape[1] != W.shape[0]:
            raise ShapeMismatch(f"input has {A.shape[1]} columns, layer expects {W.shape[0]}")
        A = A @ W
        A += b
        np.maximum(A, 0.0, out=A)
    return A


def forward_hidden_taped(pvars: dict, x) -> ad.Var:
    depth = sum(1 for k in pvars if k.startswith("W"))
    tape = next(iter(pvars.values())).tape if pvars else ad.Tape()
    A = x if isinstance(x, ad.Var) else tape.const(np.asarray(x))
    for i in range(1, depth + 1):
        W = pvars[f"W{i}"]
        if A.shape[1] != W.shape[0]:
            raise ShapeMismatch(f"input has {A.shape[1]} columns, layer expects {W.shape[0]}")
        A = ad.relu(A @ W + pvars[f"b{i}"])
    return A


# permutations
@dataclass(frozen=True)
class PermutationSet:
    perms: np.ndarray  # T x n integer array, row t is a bijection of 0..n-1
    seed: object = None

    @property
    def T(self) -> int:
        return self.perms.shape[0]

    @property
    def n(self) -> int:
        return self.perms.shape[1]

    def apply(self, Y: np.ndarray) -> np.ndarray:
        """n x T matrix whose column t is pi^t(Y) = (Y_{pi(1)}, ..., Y_{pi(n)})."""
        return np.asarray(Y)[self.perms].T


def sample_permutations(n: int, T: int, seed) -> PermutationSet:
    if n < 1 or T < 0:
        raise ValueError("need n >= 1 and T >= 0")
    rng = np.random.default_rng(seed)
    perms = np.empty((T, n), dtype=np.int64)
    for t in range(T):
        perms[t] = rng.permutation(n)
    perms.setflags(write=False)
    return PermutationSet(perms, seed)


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def stack_targets(Y: np.ndarray, perms: Optional[PermutationSet]) -> np.ndarray:
    """n x (T+1) matrix [Y, pi^1(Y), ..., pi^T(Y)]."""
    Y = np.asarray(Y, dtype=float)
    if perms is None or perms.T == 0:
        return Y[:, None]
    if perms.n != len(Y):
        raise ShapeMismatch(f"permutations act on {perms.n} items, labels have {len(Y)}")
    return np.column_stack([Y, perms.apply(Y)])


def label_dither(Y: np.ndarray, perms: Optional[PermutationSet], sigma: float, rng) -> np.ndarray:
    """Target matrix [Y + eps, pi^t(Y) + eps_t] with fresh N(0, sigma^2) noise."""
    targets = stack_targets(Y, perms)
    if sigma == 0:
        return targets
    return targets + sigma * rng.standard_normal(targets.shape)


def structured_noise(n: int, T: int, sigma: float, rng) -> Optional[np.ndarray]:
    """n x (T+1) matrix [xi, xi_1, ..., xi_T] of N(0, sigma^2) draws, or None if sigma == 0."""
    if sigma == 0:
        return None
    return sigma * rng.standard_normal((n, T + 1))


# ridge head on the tape
Hat = Callable[[ad.Var], ad.Var]


def ridge_hat(A: ad.Var, lam: ad.Var, form: str = "auto") -> Hat:
    """Return V -> H V for H = A (A^T A + lam I)^{-1} A^T, differentiable in A and lam."""
    n, J = A.shape
    if linalg.pick_form(n, J, form) == "gram":
        M = ad.shift_diagonal(A.T @ A, lam)
        return lambda V: A @ ad.spd_solve(M, A.T @ V)
    K = ad.gram(A)
    M = ad.shift_diagonal(K, lam)
    return lambda V: K @ ad.spd_solve(M, V)


def _as_var(x, tape) -> ad.Var:
    return x if isinstance(x, ad.Var) else tape.const(np.asarray(x, dtype=float))


def _resolve_hat(A, lam, hat, form):
    if hat is not None:
        return hat, ad.Tape()
    tape = next((v.tape for v in (A, lam) if isinstance(v, ad.Var) and v.tape is not None), None)
    tape = tape or ad.Tape()
    return ridge_hat(_as_var(A, tape), _as_var(lam, tape), form), tape


def _project(hat: Hat, tape, S: np.ndarray, noise: Optional[np.ndarray]):
    """Apply H to the target columns and, if present, the noise columns."""
    k = S.shape[1]
    if noise is None:
        return hat(tape.const(S)), None
    out = hat(tape.const(np.hstack([S, noise])))
    return out[:, :k], out[:, k:]


def rmse_baseline(Y: np.ndarray) -> float:
    Y = np.asarray(Y, dtype=float)
    return float(np.sqrt(np.mean((Y - Y.mean()) ** 2)))


def mlr_loss(A, lam, Y, perms: Optional[PermutationSet] = None, noise: Optional[np.ndarray] = None,
             *, targets: Optional[np.ndarray] = None, hat: Optional[Hat] = None,
             form: str = "auto") -> ad.Var:
    """Regression MLR loss.

    RMSE(Y + (I-H)xi ; HY) + 1/T sum_t | RMSE(Y; mean(Y)) - RMSE(pi_t Y + (I-H)xi_t ; H pi_t Y) |

    ``A``/``lam`` may be tape variables or plain arrays; ``hat`` overrides
    the ridge projector (used to probe algebraic limits). ``targets`` is the
    (optionally dithered) n x (T+1) matrix [Y, pi^t(Y)]; ``noise`` is the
    n x (T+1) structured-dithering draw [xi, xi_t], or None for sigma = 0.
    The baseline always uses the clean labels ``Y``.
    """
    hat, tape = _resolve_hat(A, lam, hat, form)
    S = stack_targets(Y, perms) if targets is None else np.asarray(targets, dtype=float)
    HS, Hxi = _project(hat, tape, S, noise)
    fit = tape.const(S) if noise is None else tape.const(S) + (tape.const(noise) - Hxi)
    resid = fit - HS
    rmse = ad.sqrt(ad.mean(ad.square(resid), axis=0))
    loss = rmse[0]
    T = S.shape[1] - 1
    if T > 0:
        base = rmse_baseline(Y)
        loss = loss + ad.mean(ad.abs_(base - rmse[1:]))
    return loss


def binary_entropy(p: float) -> float:
    return -(p * math.log(p) + (1 - p) * math.log(1 - p))


def bce_mlr_loss(A, lam, Y, perms: Optional[PermutationSet] = None, noise: Optional[np.ndarray] = None,
                 *, hat: Optional[Hat] = None, form: str = "auto") -> ad.Var:
    """Classification MLR loss on logits.

    BCE(Y ; Y* + (I-H)xi + H Y*) + 1/T sum_t | BCE(Y ; mean(Y)) - BCE(pi_t Y ; pi_t Y* + (I-H)xi_t + H pi_t Y*) |

    with Y* = 2Y - 1. The baseline is the entropy of the class prior, i.e.
    the cross-entropy of the constant logit logit(mean(Y)).
    """
    Y = np.asarray(Y, dtype=float)
    if not np.all((Y == 0) | (Y == 1)):
        raise ValueError("classification labels must be 0/1")
    p = float(Y.mean())
    if p in (0.0, 1.0):
        raise DegenerateClass("batch contains a single class")
    hat, tape = _resolve_hat(A, lam, hat, form)
    S = stack_targets(2.0 * Y - 1.0, perms)
    HS, Hxi = _project(hat, tape, S, noise)
    Sv = tape.const(S)
    logits = (Sv if noise is None else Sv + (tape.const(noise) - Hxi)) + HS
    labels = tape.const((S + 1.0) / 2.0)
    bce = ad.mean(ad.softplus(logits) - labels * logits, axis=0)
    loss = bce[0]
    if S.shape[1] > 1:
        loss = loss + ad.mean(ad.abs_(binary_entropy(p) - bce[1:]))
    return loss


def dense_mse_loss(A: ad.Var, out: ad.Var, targets: np.ndarray) -> ad.Var:
    """Mean squared error of a learned linear output layer (plain FFNN)."""
    pred = A @ out
    return ad.mean(ad.square(pred - A.tape.const(np.asarray(targets)[:, :1])))


def task_loss(config: MlrConfig, A, lam, Y, perms, noise, targets=None) -> ad.Var:
    if config.task == "clf":
        return bce_mlr_loss(A, lam, Y, perms, noise, form=config.ridge_form)
    return mlr_loss(A, lam, Y, perms, noise, targets=targets, form=config.ridge_form)


# ridge initialisation
@dataclass
class LambdaInit:
    value: float
    k_hat: int
    losses: np.ndarray
    grid: np.ndarray = field(default_factory=lambda_grid)


def init_lambda(params: ModelParams, x, Y, perms, noise, config: MlrConfig,
                targets=None, grid: Optional[np.ndarray] = None) -> LambdaInit:
    """Pick the starting ridge penalty where the loss varies most across the grid.

    One forward pass; plain-array evaluations (nothing is recorded for
    differentiation); the same noise and permutations for every grid point.
    """
    grid = lambda_grid() if grid is None else np.asarray(grid, dtype=float)
    A = forward_hidden(params, x)
    losses = np.array([
        float(task_loss(config, A, lam, Y, perms, noise, targets).value) for lam in grid
    ])
    diffs = losses[1:] - losses[:-1]
    k = int(np.argmax(diffs))
    value = math.sqrt(grid[k] * grid[k + 1])
    value = min(max(value, grid[0]), grid[-1])
    return LambdaInit(value, k, losses, grid)


def hardmax_label(scores) -> np.ndarray:
    """1 where the ridge score is strictly positive, else 0."""
    return (np.asarray(scores) > 0).astype(np.int64)


def logistic(scores) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -np.asarray(scores, dtype=float)))


# trained model
@dataclass
class TrainedModel:
    params: ModelParams
    task: str = "reg"
    w_out: Optional[np.ndarray] = None
    config: Optional[MlrConfig] = None

    @property
    def finalized(self) -> bool:
        return self.w_out is not None

    def raw(self, x) -> np.ndarray:
        if self.w_out is None:
            raise NotFinalized("model has no output weights; call finalize first")
        return forward_hidden(self.params, x) @ self.w_out

    def predict(self, x) -> np.ndarray:
        """Regression values, or hardmax labels for classification."""
        scores = self.raw(x)
        return hardmax_label(scores) if self.task == "clf" else scores

    def predict_proba(self, x) -> np.ndarray:
        return logistic(self.raw(x))


def head_targets(Y, task: str) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    return 2.0 * Y - 1.0 if task == "clf" else Y


def output_weights(params: ModelParams, x, Y, task: str = "reg", form: str = "auto") -> np.ndarray:
    """W_out = P(theta, lam, x) Y (Y* for classification), or the learned dense layer."""
    if params.out is not None:
        return params.out[:, 0].copy()
    A = forward_hidden(params, x)
    return linalg.ridge_weights(A, params.lam, head_targets(Y, task), form)


def finalize(params: ModelParams, x, Y, task: str = "reg", config: Optional[MlrConfig] = None) -> TrainedModel:
    form = config.ridge_form if config is not None else "auto"
    return TrainedModel(params, task, output_weights(params, x, Y, task, form), config)
