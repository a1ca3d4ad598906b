"""Dense float64 linear algebra shared by every other module.

Tensors are plain ``numpy.ndarray`` objects of dtype float64; column vectors
are stored as ``[d, 1]`` arrays when a matrix is needed.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a float64 array, rejecting non-finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def solve_spd(A: np.ndarray, B: np.ndarray, sym_tol: float = 1e-10) -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive-definite ``A`` by Cholesky.

    Raises :class:`NotPositiveDefiniteError` when the factorization fails;
    callers decide whether to retry with diagonal jitter.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"A must be square, got {A.shape}")
    vec = B.ndim == 1
    if vec:
        B = B[:, None]
    if B.shape[0] != A.shape[0]:
        raise ShapeError(f"cannot solve {A.shape} system with right-hand side {B.shape}")
    scale = max(1.0, float(np.max(np.abs(A))))
    if np.max(np.abs(A - A.T)) > sym_tol * scale:
        raise ValueError("A is not symmetric")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"Cholesky factorization failed: {exc}") from None
    X = scipy.linalg.cho_solve(factor, B, check_finite=False)
    return X[:, 0] if vec else X


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ShapeError("layernorm needs at least two features")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu_tanh(x: np.ndarray) -> np.ndarray:
    """The inner ``tanh`` term of the GELU approximation."""
    # x*x*x is far cheaper than x**3 in numpy
    t = x * x
    t *= _GELU_A
    t += 1.0
    t *= x
    t *= _GELU_C
    return np.tanh(t, out=t)


def gelu(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    """GELU, tanh approximation."""
    if t is None:
        t = gelu_tanh(x)
    out = t + 1.0
    out *= x
    out *= 0.5
    return out


def gelu_grad(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = gelu_tanh(x)
    # 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2)
    poly = x * x
    poly *= 3 * _GELU_A
    poly += 1.0
    poly *= _GELU_C * 0.5
    poly *= x
    sech2 = t * t
    np.subtract(1.0, sech2, out=sech2)
    poly *= sech2
    poly += 0.5
    poly += 0.5 * t
    return poly


def cosine(x: np.ndarray, y: np.ndarray) -> float | None:
    """Cosine similarity, or ``None`` when either vector is zero."""
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        return None
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))
