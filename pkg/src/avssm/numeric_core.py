"""Dense-array helpers shared by every other module.

All correctness-critical math runs in float64 on row-major numpy arrays.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where it must not."""


def make_rng(seed) -> np.random.Generator:
    """Return a PCG64 generator. ``seed`` may be an int or a sequence of ints."""
    return np.random.Generator(np.random.PCG64(seed))


def check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in {name}")


def as_f64(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    check_finite(name, arr)
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_f64(a, "matmul lhs")
    b = as_f64(b, "matmul rhs")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ShapeError("softmax of an empty array")
    z = np.exp(v - v.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softplus(x):
    """ln(1 + e^x) via max(x, 0) + log1p(e^-|x|)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def gelu(x) -> np.ndarray:
    """Tanh-approximated GELU."""
    return 0.5 * x * (1.0 + np.tanh(GELU_C * x * (1.0 + 0.044715 * x * x)))


def gelu_grad(x) -> np.ndarray:
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + 0.044715 * x2))
    du = GELU_C * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du


def grad_check(
    f: Callable[[np.ndarray], float],
    analytic: np.ndarray,
    x: np.ndarray,
    eps: float = 1e-5,
    coords: Optional[np.ndarray] = None,
) -> float:
    """Largest symmetric relative error between ``analytic`` and central differences.

    ``f`` maps an array shaped like ``x`` to a scalar. Each checked coordinate
    contributes ``|a - n| / max(1e-8, |a| + |n|)``. ``coords`` optionally limits
    the check to a subset of flat indices.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != input shape {x.shape}")
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        num = (fp - fm) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - num) / max(1e-8, abs(a) + abs(num))
        worst = max(worst, err)
    return float(worst)
