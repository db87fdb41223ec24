"""Full per-frame AU network and its backward pass.

Pipeline for a batch of clips ``(B, T)``:

1. HGA turns every frame's patch grid into ``M`` region tokens; their mean is
   the visual feature ``x_v`` (``d_model`` wide).
2. A linear map lifts raw audio features to ``x_a`` (``d_model`` wide).
3. ``layers`` residual AG-SSM blocks, ``z <- z + agssm(z, x_a)``; or, for the
   framewise baseline, ``z = x_v + MLP([x_v, x_a])`` applied frame by frame.
4. A linear head gives 12 logits per frame and a sigmoid the probabilities.

Parameters live in one flat ``dict`` with dotted prefixes (``hga.w_q``,
``ssm0.w_s``, ``audio.w``, ``head.w`` ...), which is what the optimizer, SWA
and checkpoints operate on.
"""

from __future__ import annotations

from typing import Dict, NamedTuple

import numpy as np

from . import ag_ssm, hga
from .numeric_core import ShapeError, gelu, gelu_grad, sigmoid

Params = Dict[str, np.ndarray]
TEMPORAL_KINDS = ("agssm", "framewise")


def sub(params: Params, prefix: str) -> Params:
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def init_network(rng: np.random.Generator, *, d_v: int, d_a: int, num_classes: int, d_model: int = 32,
                 state_dim: int = 16, heads: int = 8, layers: int = 1, temporal: str = "agssm") -> Params:
    if temporal not in TEMPORAL_KINDS:
        raise ValueError(f"temporal must be one of {TEMPORAL_KINDS}")
    params: Params = {}
    for k, v in hga.init_params(d_v, d_model, rng, heads=heads).items():
        params[f"hga.{k}"] = v
    params["audio.w"] = rng.normal(0.0, 1.0 / np.sqrt(d_a), (d_a, d_model))
    params["audio.b"] = np.zeros(d_model)
    if temporal == "agssm":
        for i in range(layers):
            for k, v in ag_ssm.init_params(d_model, state_dim, rng).items():
                params[f"ssm{i}.{k}"] = v
    else:
        params["frame.w1"] = rng.normal(0.0, 1.0 / np.sqrt(2 * d_model), (2 * d_model, d_model))
        params["frame.b1"] = np.zeros(d_model)
        params["frame.w2"] = rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_model))
        params["frame.b2"] = np.zeros(d_model)
    params["head.w"] = rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, num_classes))
    params["head.b"] = np.zeros(num_classes)
    return params


def param_groups(params: Params) -> Dict[str, int]:
    """Parameter count per top-level module prefix."""
    counts: Dict[str, int] = {}
    for k, v in params.items():
        mod = k.split(".", 1)[0]
        counts[mod] = counts.get(mod, 0) + int(v.size)
    return counts


def _layers(params: Params) -> int:
    n = 0
    while f"ssm{n}.a_log" in params:
        n += 1
    return n


class NetCache(NamedTuple):
    hga_cache: object
    shape: tuple
    n_regions: int
    audio: np.ndarray
    x_v: np.ndarray
    x_a: np.ndarray
    ssm_caches: list
    frame: tuple
    z: np.ndarray
    probs: np.ndarray


def forward(params: Params, tokens, pool, audio, *, heads: int = 8, chunk=None, return_cache: bool = False):
    """Per-frame probabilities ``(B, T, C)``.

    ``tokens`` is ``(B, T, N_v, D_v)``, ``pool`` the region pooling weights
    ``(B, T, M, N_v)`` and ``audio`` ``(B, T, D_a)``.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    pool = np.asarray(pool, dtype=np.float64)
    audio = np.asarray(audio, dtype=np.float64)
    if tokens.ndim != 4 or pool.ndim != 4 or audio.ndim != 3:
        raise ShapeError("expected tokens (B,T,N_v,D_v), pool (B,T,M,N_v), audio (B,T,D_a)")
    B, T, n_v, d_v = tokens.shape
    if pool.shape[:2] != (B, T) or audio.shape[:2] != (B, T):
        raise ShapeError("visual and audio streams are not time-aligned")
    M = pool.shape[2]
    regions = hga.forward(tokens.reshape(B * T, n_v, d_v), pool.reshape(B * T, M, n_v),
                          sub(params, "hga"), heads=heads, return_cache=return_cache)
    if return_cache:
        regions, hcache = regions
    x_v = regions.mean(axis=1).reshape(B, T, -1)
    x_a = audio @ params["audio.w"] + params["audio.b"]

    ssm_caches, frame = [], ()
    z = x_v
    n_layers = _layers(params)
    if n_layers:
        for i in range(n_layers):
            out = ag_ssm.forward(z, x_a, sub(params, f"ssm{i}"), chunk=chunk, return_cache=return_cache)
            if return_cache:
                out, c = out
                ssm_caches.append(c)
            z = z + out
    else:
        cat = np.concatenate([x_v, x_a], axis=-1)
        a1 = cat @ params["frame.w1"] + params["frame.b1"]
        h1 = gelu(a1)
        z = x_v + h1 @ params["frame.w2"] + params["frame.b2"]
        frame = (cat, a1, h1)
    logits = z @ params["head.w"] + params["head.b"]
    probs = sigmoid(logits)
    if not return_cache:
        return probs
    return probs, NetCache(hcache, (B, T, n_v, d_v), M, audio, x_v, x_a, ssm_caches, frame, z, probs)


def backward(params: Params, cache: NetCache, grad_probs) -> Params:
    """Gradients of ``sum(grad_probs * probs)`` for every parameter."""
    B, T, n_v, d_v = cache.shape
    p = cache.probs
    g_logits = np.asarray(grad_probs, dtype=np.float64) * p * (1.0 - p)
    grads: Params = {}
    grads["head.w"] = np.einsum("btd,btc->dc", cache.z, g_logits)
    grads["head.b"] = g_logits.sum(axis=(0, 1))
    g_z = g_logits @ params["head.w"].T
    g_xa = np.zeros_like(cache.x_a)

    if cache.ssm_caches:
        for i in reversed(range(len(cache.ssm_caches))):
            lg, g_in, g_a = ag_ssm.backward(cache.ssm_caches[i], g_z, sub(params, f"ssm{i}"))
            for k, v in lg.items():
                grads[f"ssm{i}.{k}"] = v
            g_z = g_z + g_in
            g_xa += g_a
        g_xv = g_z
    else:
        cat, a1, h1 = cache.frame
        grads["frame.w2"] = np.einsum("bth,btd->hd", h1, g_z)
        grads["frame.b2"] = g_z.sum(axis=(0, 1))
        g_a1 = (g_z @ params["frame.w2"].T) * gelu_grad(a1)
        grads["frame.w1"] = np.einsum("bti,bth->ih", cat, g_a1)
        grads["frame.b1"] = g_a1.sum(axis=(0, 1))
        g_cat = g_a1 @ params["frame.w1"].T
        d = cache.x_v.shape[-1]
        g_xv = g_z + g_cat[..., :d]
        g_xa += g_cat[..., d:]

    grads["audio.w"] = np.einsum("bti,btd->id", cache.audio, g_xa)
    grads["audio.b"] = g_xa.sum(axis=(0, 1))
    g_regions = np.repeat((g_xv.reshape(B * T, 1, -1) / cache.n_regions), cache.n_regions, axis=1)
    hg, _ = hga.backward(cache.hga_cache, g_regions, sub(params, "hga"))
    for k, v in hg.items():
        grads[f"hga.{k}"] = v
    return grads
