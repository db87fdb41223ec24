"""Diagonal state-space primitives: zero-order-hold discretization and scans.

Array layout is time-major. For a scan over ``T`` steps the per-step tensors
``a_bar``, ``b_bar`` and ``c`` have shape ``(T, *batch, N)``, the scalar input
sequence ``x`` has shape ``(T, *batch)`` and the initial state ``h0`` has shape
``(*batch, N)``. Each batch entry (one channel of one sequence) owns its own
N-dimensional state; batching is a pure outer loop done by broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .numeric_core import NonFiniteError, ShapeError, check_finite

SERIES_THRESHOLD = 1e-6
# below this |delta*a| the derivative of b_bar w.r.t. a switches to a Taylor series
DERIV_SERIES_THRESHOLD = 1e-2


@dataclass
class ContinuousSsm:
    """Diagonal continuous-time SSM ``h' = A h + B x``, ``y = C h``."""

    a_diag: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.a_diag = np.asarray(self.a_diag, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.a_diag.ndim != 1 or self.a_diag.size < 1:
            raise ShapeError("a_diag must be a non-empty vector")
        if self.b.shape != self.a_diag.shape or self.c.shape != self.a_diag.shape:
            raise ShapeError("a_diag, b and c must share shape (N,)")
        if np.any(self.a_diag >= 0):
            raise ValueError("a_diag must be strictly negative")

    @classmethod
    def from_log(cls, a_log, b, c) -> "ContinuousSsm":
        return cls(-np.exp(np.asarray(a_log, dtype=np.float64)), b, c)

    @property
    def state_dim(self) -> int:
        return self.a_diag.size

    def discretize(self, delta: float) -> "DiscreteSteps":
        a_bar, b_bar = discretize_zoh(self.a_diag, self.b, delta)
        return DiscreteSteps(a_bar[None], b_bar[None], self.c[None])


class DiscreteSteps(NamedTuple):
    """Stacked per-timestep discrete parameters, each shaped ``(T, *batch, N)``."""

    a_bar: np.ndarray
    b_bar: np.ndarray
    c: np.ndarray


class ScanGrads(NamedTuple):
    a_bar: np.ndarray
    b_bar: np.ndarray
    c: np.ndarray
    x: np.ndarray
    h0: np.ndarray


def _phi_series(delta, a):
    x = delta * a
    return delta * (1.0 + x * (0.5 + x / 6.0))


def discretize_zoh(a, b, delta):
    """Zero-order hold for a diagonal system, elementwise.

    Returns ``a_bar = exp(delta*a)`` and ``b_bar = (exp(delta*a) - 1) / a * b``;
    the latter uses a Taylor series when ``|delta*a| < 1e-6``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("delta must be strictly positive")
    check_finite("discretize_zoh inputs", a, b, delta)
    x = delta * a
    a_bar = np.exp(x)
    small = np.abs(x) < SERIES_THRESHOLD
    safe_a = np.where(small, 1.0, a)
    phi = np.where(small, _phi_series(delta, a), np.expm1(x) / safe_a)
    return a_bar, phi * b


def zoh_backward(a, b, delta, g_a_bar, g_b_bar):
    """Vector-Jacobian product of :func:`discretize_zoh`.

    Returns gradients w.r.t. ``(a, b, delta)`` at the broadcast shape of the
    incoming gradients; callers reduce over broadcast axes themselves.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    x = delta * a
    e = np.exp(x)
    small_phi = np.abs(x) < SERIES_THRESHOLD
    safe_a = np.where(small_phi, 1.0, a)
    phi = np.where(small_phi, _phi_series(delta, a), np.expm1(x) / safe_a)

    # d phi / d delta = exp(delta*a); d phi / d a = delta^2 * chi(delta*a)
    small = np.abs(x) < DERIV_SERIES_THRESHOLD
    safe_x = np.where(small, 1.0, x)
    chi_direct = (safe_x * e - np.expm1(safe_x)) / (safe_x * safe_x)
    chi_series = 0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x * (1.0 / 30.0 + x / 144.0)))
    chi = np.where(small, chi_series, chi_direct)

    g_phi = g_b_bar * b
    g_b = g_b_bar * phi
    g_delta = g_a_bar * e * a + g_phi * e
    g_a = g_a_bar * e * delta + g_phi * delta * delta * chi
    return g_a, g_b, g_delta


def linear_recurrence(a_bar, u, h0):
    """Sequential ``h_t = a_bar_t * h_{t-1} + u_t``; returns all states ``(T, ...)``."""
    h = np.empty(np.broadcast_shapes(a_bar.shape, u.shape))
    prev = h0
    for t in range(h.shape[0]):
        prev = a_bar[t] * prev + u[t]
        h[t] = prev
    return h


def linear_recurrence_chunked(a_bar, u, h0, chunk: int):
    """Same recurrence as :func:`linear_recurrence`, blocked into chunks.

    Pass 1 scans every chunk from a zero state at once (vectorized across
    chunks) while accumulating the running product of ``a_bar`` inside each
    chunk. Pass 2 carries boundary states across chunks sequentially. Pass 3
    adds each chunk's incoming state times the precomposed running product.
    Python-level iterations drop from ``T`` to ``chunk + T/chunk``.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    shape = np.broadcast_shapes(a_bar.shape, u.shape)
    T = shape[0]
    if T == 0:
        return np.empty(shape)
    L = min(chunk, T)
    n_chunks = -(-T // L)
    pad = n_chunks * L - T
    a_full = np.broadcast_to(a_bar, shape)
    u_full = np.broadcast_to(u, shape)
    if pad:
        tail = (pad,) + shape[1:]
        a_full = np.concatenate([a_full, np.ones(tail)])
        u_full = np.concatenate([u_full, np.zeros(tail)])
    a_blk = a_full.reshape((n_chunks, L) + shape[1:])
    u_blk = u_full.reshape((n_chunks, L) + shape[1:])

    local = np.empty_like(u_blk)
    cum = np.empty_like(a_blk)
    local[:, 0] = u_blk[:, 0]
    cum[:, 0] = a_blk[:, 0]
    for j in range(1, L):
        local[:, j] = a_blk[:, j] * local[:, j - 1] + u_blk[:, j]
        cum[:, j] = a_blk[:, j] * cum[:, j - 1]

    carry = np.empty((n_chunks,) + shape[1:])
    prev = np.broadcast_to(h0, shape[1:])
    for k in range(n_chunks):
        carry[k] = prev
        prev = cum[k, L - 1] * prev + local[k, L - 1]

    h = cum * carry[:, None] + local
    return h.reshape((n_chunks * L,) + shape[1:])[:T]


def _validate(steps: DiscreteSteps, x, h0):
    a_bar, b_bar, c = (np.asarray(s, dtype=np.float64) for s in steps)
    x = np.asarray(x, dtype=np.float64)
    h0 = np.asarray(h0, dtype=np.float64)
    T = x.shape[0]
    for name, arr in (("a_bar", a_bar), ("b_bar", b_bar), ("c", c)):
        if arr.shape[0] != T:
            raise ShapeError(f"{name} has {arr.shape[0]} steps, x has {T}")
        if arr.shape != a_bar.shape:
            raise ShapeError(f"{name} shape {arr.shape} != a_bar shape {a_bar.shape}")
    if a_bar.shape[1:-1] != x.shape[1:] or h0.shape != a_bar.shape[1:]:
        raise ShapeError(
            f"inconsistent shapes: steps {a_bar.shape}, x {x.shape}, h0 {h0.shape}"
        )
    return a_bar, b_bar, c, x, h0


def _run(steps, x, h0, chunk: Optional[int]):
    a_bar, b_bar, c, x, h0 = _validate(steps, x, h0)
    u = b_bar * x[..., None]
    if chunk is None:
        h = linear_recurrence(a_bar, u, h0)
    else:
        h = linear_recurrence_chunked(a_bar, u, h0, chunk)
    y = np.einsum("...n,...n->...", c, h)
    h_final = h[-1] if len(h) else h0.copy()
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(h_final))):
        raise NonFiniteError("scan produced non-finite values")
    return y, h_final, h


def scan_sequential(steps: DiscreteSteps, x, h0):
    """Left-to-right recurrence ``h_t = a_bar_t h_{t-1} + b_bar_t x_t``, ``y_t = <c_t, h_t>``."""
    y, h_final, _ = _run(steps, x, h0, None)
    return y, h_final


def scan_chunked(steps: DiscreteSteps, x, h0, chunk: int):
    """Same semantics as :func:`scan_sequential` with chunk-blocked evaluation."""
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    y, h_final, _ = _run(steps, x, h0, chunk)
    return y, h_final


def scan_states(steps: DiscreteSteps, x, h0, chunk: Optional[int] = None):
    """Forward scan that also returns every hidden state, for use in backward."""
    return _run(steps, x, h0, chunk)


def scan_backward(steps: DiscreteSteps, x, h0, grad_y, h=None, chunk: Optional[int] = None) -> ScanGrads:
    """Backpropagation through time for :func:`scan_sequential`.

    The adjoint ``lam_t = grad_y_t * c_t + a_bar_{t+1} * lam_{t+1}`` is itself a
    linear recurrence run in reverse, so it reuses the forward kernels.
    """
    a_bar, b_bar, c, x, h0 = _validate(steps, x, h0)
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if grad_y.shape != x.shape:
        raise ShapeError(f"grad_y shape {grad_y.shape} != output shape {x.shape}")
    if h is None:
        _, _, h = _run(steps, x, h0, chunk)
    T = x.shape[0]
    if T == 0:
        zeros = np.zeros_like
        return ScanGrads(zeros(a_bar), zeros(b_bar), zeros(c), zeros(x), zeros(h0))

    e = grad_y[..., None] * c
    a_next = np.empty_like(a_bar)
    a_next[:-1] = a_bar[1:]
    a_next[-1] = 0.0
    zero = np.zeros_like(h0)
    if chunk is None:
        lam = linear_recurrence(a_next[::-1], e[::-1], zero)[::-1]
    else:
        lam = linear_recurrence_chunked(a_next[::-1], e[::-1], zero, chunk)[::-1]

    h_prev = np.concatenate([h0[None], h[:-1]])
    g_a = lam * h_prev
    g_b = lam * x[..., None]
    g_c = grad_y[..., None] * h
    g_x = np.einsum("...n,...n->...", lam, b_bar)
    g_h0 = a_bar[0] * lam[0]
    return ScanGrads(g_a, g_b, g_c, g_x, g_h0)
