"""Dense SPD solves and the ridge projector.

Matrices are plain 2-D numpy arrays. Float64 is the default everywhere;
float32 is only used when a caller explicitly casts its inputs.

Two algebraically equivalent forms of the ridge projector are supported:

- ``gram``:   P = (A^T A + lam I_J)^{-1} A^T        (J x J solve)
- ``kernel``: P = A^T (A A^T + lam I_n)^{-1}        (n x n solve)

``auto`` picks the smaller system.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import NotPositiveDefinite, ShapeMismatch

SYMMETRY_RTOL = 1e-8
JITTER_SCALE = 1e-10


class SpdFactor:
    """Cholesky factor of a symmetric positive-definite matrix.

    Reusable for any number of right-hand sides.
    """

    def __init__(self, M: np.ndarray, check_symmetry: bool = True):
        M = np.asarray(M)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ShapeMismatch(f"expected a square matrix, got shape {M.shape}")
        if check_symmetry:
            scale = np.linalg.norm(M)
            if np.max(np.abs(M - M.T), initial=0.0) > SYMMETRY_RTOL * max(scale, 1.0):
                raise ValueError("matrix is not symmetric")
        self.size = M.shape[0]
        self.jittered = False
        try:
            self._cf = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            jitter = JITTER_SCALE * np.trace(M) / self.size
            shifted = M + jitter * np.eye(self.size, dtype=M.dtype)
            try:
                self._cf = scipy.linalg.cho_factor(shifted, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefinite(
                    "Cholesky factorization failed after jitter retry; "
                    "ridge penalty too small or activations degenerate"
                ) from exc
            self.jittered = True
        if not np.all(np.isfinite(self._cf[0].diagonal())):
            raise NotPositiveDefinite("non-finite Cholesky factor")

    def solve(self, B: np.ndarray) -> np.ndarray:
        B = np.asarray(B)
        if B.shape[0] != self.size:
            raise ShapeMismatch(f"rhs has {B.shape[0]} rows, factor has size {self.size}")
        return scipy.linalg.cho_solve(self._cf, B, check_finite=False)


def spd_solve(M: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve M X = B for symmetric positive-definite M."""
    return SpdFactor(M).solve(B)


def shift_diagonal(M: np.ndarray, lam) -> np.ndarray:
    """Return M + lam * I without mutating M."""
    out = M.copy()
    idx = np.arange(M.shape[0])
    out[idx, idx] += lam
    return out


def pick_form(n: int, J: int, form: str = "auto") -> str:
    if form == "auto":
        return "kernel" if n < J else "gram"
    if form not in ("gram", "kernel"):
        raise ValueError(f"unknown ridge form {form!r}")
    return form


def _check(A, lam):
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise ShapeMismatch(f"activation matrix must be 2-D and non-empty, got {A.shape}")
    if not lam > 0:
        raise ValueError(f"ridge penalty must be positive, got {lam}")
    return A


def ridge_projector(A: np.ndarray, lam: float, form: str = "gram"):
    """Return (P, H) for activations ``A`` (n x J) and penalty ``lam``."""
    A = _check(A, lam)
    n, J = A.shape
    if pick_form(n, J, form) == "gram":
        P = spd_solve(shift_diagonal(A.T @ A, lam), A.T)
    else:
        P = spd_solve(shift_diagonal(A @ A.T, lam), A).T
    H = A @ P
    return P, H


def ridge_apply(A: np.ndarray, lam: float, Z: np.ndarray, form: str = "auto") -> np.ndarray:
    """Compute H @ Z without materialising H.

    The operation order mirrors the taped version used in the losses, so
    both produce bit-identical results for identical inputs.
    """
    A = _check(A, lam)
    n, J = A.shape
    if pick_form(n, J, form) == "gram":
        M = shift_diagonal(A.T @ A, lam)
        return A @ spd_solve(M, A.T @ Z)
    K = A @ A.T
    return K @ spd_solve(shift_diagonal(K, lam), Z)


def ridge_weights(A: np.ndarray, lam: float, Y: np.ndarray, form: str = "auto") -> np.ndarray:
    """Output-layer weights P @ Y (J x k, or J-vector for a vector Y)."""
    A = _check(A, lam)
    n, J = A.shape
    if pick_form(n, J, form) == "gram":
        return spd_solve(shift_diagonal(A.T @ A, lam), A.T @ Y)
    return A.T @ spd_solve(shift_diagonal(A @ A.T, lam), Y)
