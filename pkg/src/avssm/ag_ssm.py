"""Audio-guided selective state-space layer.

Per frame, visual and audio features are fused into a descriptor ``s_t`` that
synthesizes the step size, input and output projections of a diagonal SSM;
the visual input entering the scan is gated by a sigmoid of the audio feature.

Parameters are a flat ``dict`` of float64 arrays (``d_model`` = D, ``state_dim`` = N):

=============  ===========  =================================================
name           shape        role
=============  ===========  =================================================
``w_s``        (D, 2D)      descriptor projection over ``[x_v, x_a]``
``b_s``        (D,)         descriptor bias
``w_delta``    (D, D)       step-size projection
``delta_base`` (D,)         per-channel step-size offset
``w_b``        (N, D)       input projection
``b_b``        (N,)
``w_c``        (N, D)       output projection
``b_c``        (N,)
``w_g``        (D, D)       audio gate weights
``a_log``      (D, N)       evolution diagonal, ``a = -exp(a_log)``
=============  ===========  =================================================
"""

from __future__ import annotations

from typing import Dict, NamedTuple, Optional

import numpy as np

from .numeric_core import ShapeError, check_finite, sigmoid, softplus
from .ssm_core import DiscreteSteps, discretize_zoh, scan_backward, scan_states, zoh_backward

Params = Dict[str, np.ndarray]

PARAM_NAMES = ("w_s", "b_s", "w_delta", "delta_base", "w_b", "b_b", "w_c", "b_c", "w_g", "a_log")


def init_params(d_model: int, state_dim: int, rng: np.random.Generator,
                dt_min: float = 1e-3, dt_max: float = 1e-1) -> Params:
    D, N = d_model, state_dim
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=D))
    return {
        "w_s": rng.normal(0.0, 1.0 / np.sqrt(2 * D), size=(D, 2 * D)),
        "b_s": np.zeros(D),
        "w_delta": rng.normal(0.0, 0.1 / np.sqrt(D), size=(D, D)),
        # inverse softplus so that softplus(delta_base) == dt
        "delta_base": dt + np.log(-np.expm1(-dt)),
        "w_b": rng.normal(0.0, 1.0 / np.sqrt(D), size=(N, D)),
        "b_b": np.zeros(N),
        "w_c": rng.normal(0.0, 1.0 / np.sqrt(D), size=(N, D)),
        "b_c": np.zeros(N),
        "w_g": rng.normal(0.0, 1.0 / np.sqrt(D), size=(D, D)),
        "a_log": np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (D, 1))),
    }


def validate_params(params: Params) -> tuple:
    missing = [k for k in PARAM_NAMES if k not in params]
    if missing:
        raise KeyError(f"missing AG-SSM parameters: {missing}")
    D, N = params["a_log"].shape
    expected = {
        "w_s": (D, 2 * D), "b_s": (D,), "w_delta": (D, D), "delta_base": (D,),
        "w_b": (N, D), "b_b": (N,), "w_c": (N, D), "b_c": (N,), "w_g": (D, D),
        "a_log": (D, N),
    }
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise ShapeError(f"{k} has shape {params[k].shape}, expected {shape}")
    check_finite("AG-SSM parameters", *(params[k] for k in PARAM_NAMES))
    return D, N


def fuse_descriptor(x_v, x_a, params: Params) -> np.ndarray:
    """``s = W_s [x_v, x_a] + b_s`` (visual first, then audio)."""
    x_v = np.asarray(x_v, dtype=np.float64)
    x_a = np.asarray(x_a, dtype=np.float64)
    if x_v.shape != x_a.shape or x_v.shape[-1] * 2 != params["w_s"].shape[1]:
        raise ShapeError(f"feature shapes {x_v.shape} / {x_a.shape} do not match w_s")
    return np.concatenate([x_v, x_a], axis=-1) @ params["w_s"].T + params["b_s"]


def synthesize_params(s, params: Params):
    """Step size ``softplus(delta_base + W_delta s)`` and the projections ``B``, ``C``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != params["w_delta"].shape[1]:
        raise ShapeError(f"descriptor length {s.shape[-1]} does not match parameters")
    z = params["delta_base"] + s @ params["w_delta"].T
    delta = softplus(z)
    b = s @ params["w_b"].T + params["b_b"]
    c = s @ params["w_c"].T + params["b_c"]
    check_finite("synthesized SSM parameters", delta, b, c)
    return np.asarray(delta), b, c


def audio_gate(x_v, x_a, w_g) -> np.ndarray:
    """``x_v * sigmoid(W_g x_a)``."""
    x_v = np.asarray(x_v, dtype=np.float64)
    x_a = np.asarray(x_a, dtype=np.float64)
    w_g = np.asarray(w_g, dtype=np.float64)
    if x_v.shape != x_a.shape or w_g.shape != (x_a.shape[-1],) * 2:
        raise ShapeError("audio_gate dimension mismatch")
    return x_v * sigmoid(x_a @ w_g.T)


class AgSsmCache(NamedTuple):
    x_v: np.ndarray
    x_a: np.ndarray
    s: np.ndarray
    z: np.ndarray
    delta: np.ndarray
    b: np.ndarray
    c: np.ndarray
    gate: np.ndarray
    a_bar: np.ndarray
    b_bar: np.ndarray
    h: np.ndarray
    squeeze: bool
    chunk: Optional[int]


def forward(x_v_seq, x_a_seq, params: Params, chunk: Optional[int] = None, return_cache: bool = False):
    """Run the layer over ``(T, D)`` or ``(B, T, D)`` inputs with ``h_0 = 0``.

    Returns ``y`` with the same shape as the visual input, plus the cache needed
    by :func:`backward` when ``return_cache`` is set.
    """
    x_v = np.asarray(x_v_seq, dtype=np.float64)
    x_a = np.asarray(x_a_seq, dtype=np.float64)
    if x_v.shape != x_a.shape:
        raise ShapeError(f"visual {x_v.shape} and audio {x_a.shape} sequences differ")
    squeeze = x_v.ndim == 2
    if squeeze:
        x_v, x_a = x_v[None], x_a[None]
    D, N = validate_params(params)
    if x_v.ndim != 3 or x_v.shape[-1] != D:
        raise ShapeError(f"expected (B, T, {D}) inputs, got {x_v.shape}")
    check_finite("AG-SSM inputs", x_v, x_a)

    s = fuse_descriptor(x_v, x_a, params)
    z = params["delta_base"] + s @ params["w_delta"].T
    delta = softplus(z)
    b = s @ params["w_b"].T + params["b_b"]
    c = s @ params["w_c"].T + params["b_c"]
    gate = sigmoid(x_a @ params["w_g"].T)
    u = x_v * gate

    a = -np.exp(params["a_log"])
    a_bar, b_bar = discretize_zoh(a, b[:, :, None, :], delta[..., None])
    # time-major for the scan: (T, B, D, N)
    a_bar = a_bar.transpose(1, 0, 2, 3)
    b_bar = b_bar.transpose(1, 0, 2, 3)
    c_full = np.broadcast_to(c.transpose(1, 0, 2)[:, :, None, :], a_bar.shape)
    h0 = np.zeros(a_bar.shape[1:])
    y, _, h = scan_states(DiscreteSteps(a_bar, b_bar, c_full), u.transpose(1, 0, 2), h0, chunk)
    y = y.transpose(1, 0, 2)
    out = y[0] if squeeze else y
    if not return_cache:
        return out
    cache = AgSsmCache(x_v, x_a, s, z, delta, b, c, gate, a_bar, b_bar, h, squeeze, chunk)
    return out, cache


def backward(cache: Optional[AgSsmCache], grad_y, params: Params):
    """Gradients of ``sum(grad_y * y)`` w.r.t. every parameter and both inputs.

    Returns ``(param_grads, grad_x_v, grad_x_a)``.
    """
    if cache is None:
        raise ValueError("backward needs the cache returned by forward(return_cache=True)")
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if cache.squeeze:
        grad_y = grad_y[None]
    if grad_y.shape != cache.x_v.shape:
        raise ShapeError(f"grad_y shape {grad_y.shape} != output shape {cache.x_v.shape}")
    x_v, x_a, s = cache.x_v, cache.x_a, cache.s
    D = x_v.shape[-1]
    u = x_v * cache.gate
    c_full = np.broadcast_to(cache.c.transpose(1, 0, 2)[:, :, None, :], cache.a_bar.shape)
    steps = DiscreteSteps(cache.a_bar, cache.b_bar, c_full)
    g = scan_backward(steps, u.transpose(1, 0, 2), np.zeros(cache.a_bar.shape[1:]),
                      grad_y.transpose(1, 0, 2), h=cache.h, chunk=cache.chunk)

    g_c = g.c.sum(axis=2).transpose(1, 0, 2)  # (B, T, N)
    g_u = g.x.transpose(1, 0, 2)
    g_a_bar = g.a_bar.transpose(1, 0, 2, 3)
    g_b_bar = g.b_bar.transpose(1, 0, 2, 3)

    a = -np.exp(params["a_log"])
    g_a, g_bfull, g_delta = zoh_backward(a, cache.b[:, :, None, :], cache.delta[..., None],
                                         g_a_bar, g_b_bar)
    g_a = g_a.sum(axis=(0, 1))
    g_b = g_bfull.sum(axis=2)
    g_delta = g_delta.sum(axis=-1)
    g_z = g_delta * sigmoid(cache.z)

    grads = {}
    grads["a_log"] = g_a * a
    grads["delta_base"] = g_z.sum(axis=(0, 1))
    grads["w_delta"] = np.einsum("btd,bte->de", g_z, s)
    grads["w_b"] = np.einsum("btn,btd->nd", g_b, s)
    grads["b_b"] = g_b.sum(axis=(0, 1))
    grads["w_c"] = np.einsum("btn,btd->nd", g_c, s)
    grads["b_c"] = g_c.sum(axis=(0, 1))
    g_s = g_z @ params["w_delta"] + g_b @ params["w_b"] + g_c @ params["w_c"]

    xcat = np.concatenate([x_v, x_a], axis=-1)
    grads["w_s"] = np.einsum("btd,bte->de", g_s, xcat)
    grads["b_s"] = g_s.sum(axis=(0, 1))
    g_xcat = g_s @ params["w_s"]

    gate = cache.gate
    g_pre = g_u * x_v * gate * (1.0 - gate)
    grads["w_g"] = np.einsum("btd,bte->de", g_pre, x_a)
    g_xv = g_u * gate + g_xcat[..., :D]
    g_xa = g_pre @ params["w_g"] + g_xcat[..., D:]
    if cache.squeeze:
        g_xv, g_xa = g_xv[0], g_xa[0]
    return grads, g_xv, g_xa
