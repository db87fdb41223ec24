"""Landmark-guided granularity alignment over a grid of patch tokens.

For each region of interest the patches under its landmarks are average
pooled into a local token, which then queries every patch of the frame through
multi-head cross-attention. The attended token, the local token and the global
average are concatenated and fused by a two-layer MLP into one region token.

Linear maps use the ``x @ W`` convention here (weights are ``(in, out)``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from .numeric_core import ShapeError, check_finite, gelu, gelu_grad, softmax

Params = Dict[str, np.ndarray]

NUM_LANDMARKS = 68
PARAM_NAMES = ("w_q", "w_k", "w_v", "w_o", "b_o", "w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class RoiSpec:
    """Named groups of landmark indices; groups may overlap."""

    names: Tuple[str, ...]
    groups: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.names) != len(self.groups) or not self.groups:
            raise ValueError("RoiSpec needs one non-empty index group per name")
        for name, grp in zip(self.names, self.groups):
            if not grp:
                raise ValueError(f"region {name!r} is empty")
            if min(grp) < 0 or max(grp) >= NUM_LANDMARKS:
                raise ValueError(f"region {name!r} has indices outside [0, {NUM_LANDMARKS - 1}]")

    def __len__(self) -> int:
        return len(self.groups)

    def reordered(self, order: Sequence[int]) -> "RoiSpec":
        return RoiSpec(tuple(self.names[i] for i in order), tuple(self.groups[i] for i in order))

    def to_text(self) -> str:
        return "".join(f"{n}: {' '.join(map(str, g))}\n" for n, g in zip(self.names, self.groups))


def default_roi_spec() -> RoiSpec:
    """Seven regions on the 68-point iBUG layout (0-based indices)."""
    return RoiSpec(
        names=("left_eyebrow", "right_eyebrow", "left_eye", "right_eye", "nose", "mouth", "jaw"),
        groups=(
            tuple(range(22, 27)),
            tuple(range(17, 22)),
            tuple(range(42, 48)),
            tuple(range(36, 42)),
            tuple(range(27, 36)),
            tuple(range(48, 68)),
            tuple(range(0, 17)),
        ),
    )


def parse_roi_spec(text: str) -> RoiSpec:
    """Parse lines of the form ``name: 1 2 5-9`` (``#`` starts a comment)."""
    names, groups = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ValueError(f"line {lineno}: expected 'name: indices'")
        name, rest = (part.strip() for part in line.split(":", 1))
        idx: List[int] = []
        for tok in re.split(r"[,\s]+", rest):
            if not tok:
                continue
            if "-" in tok:
                lo, hi = tok.split("-", 1)
                idx.extend(range(int(lo), int(hi) + 1))
            else:
                idx.append(int(tok))
        names.append(name)
        groups.append(tuple(idx))
    return RoiSpec(tuple(names), tuple(groups))


def load_roi_spec(path) -> RoiSpec:
    return parse_roi_spec(Path(path).read_text())


def landmark_patch_indices(landmarks, grid_dims, frame_dims) -> np.ndarray:
    """Flat patch index of every landmark; ``landmarks[..., k] = (x, y)`` in pixels."""
    hp, wp = grid_dims
    h, w = frame_dims
    if min(hp, wp, h, w) <= 0:
        raise ValueError("grid and frame dimensions must be positive")
    pts = np.asarray(landmarks, dtype=np.float64)
    check_finite("landmarks", pts)
    x = np.clip(pts[..., 0], 0.0, w - 1)
    y = np.clip(pts[..., 1], 0.0, h - 1)
    col = np.minimum(np.floor(x / (w / wp)).astype(np.int64), wp - 1)
    row = np.minimum(np.floor(y / (h / hp)).astype(np.int64), hp - 1)
    return row * wp + col


def map_landmarks_to_patches(landmarks, roi: RoiSpec, grid_dims, frame_dims) -> List[np.ndarray]:
    """Sorted, deduplicated patch indices covered by each region of one frame."""
    idx = landmark_patch_indices(landmarks, grid_dims, frame_dims)
    return [np.unique(idx[list(grp)]) for grp in roi.groups]


def pooling_matrix(landmarks, roi: RoiSpec, grid_dims, frame_dims) -> np.ndarray:
    """Row-stochastic ``(..., M, N_v)`` averaging weights over each region's patches."""
    idx = landmark_patch_indices(landmarks, grid_dims, frame_dims)
    lead = idx.shape[:-1]
    n_v = grid_dims[0] * grid_dims[1]
    flat = idx.reshape(-1, idx.shape[-1])
    frames = np.arange(flat.shape[0])
    mask = np.zeros((flat.shape[0], len(roi), n_v), dtype=bool)
    for m, grp in enumerate(roi.groups):
        for k in grp:
            mask[frames, m, flat[:, k]] = True
    weights = mask / mask.sum(axis=-1, keepdims=True)
    return weights.reshape(lead + (len(roi), n_v))


def pool_local(tokens, p_m) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    p_m = np.asarray(p_m, dtype=np.int64)
    if p_m.size == 0:
        raise ValueError("cannot pool an empty patch set")
    if p_m.min() < 0 or p_m.max() >= tokens.shape[0]:
        raise IndexError("patch index out of range")
    return tokens[p_m].mean(axis=0)


def pool_global(tokens) -> np.ndarray:
    return np.asarray(tokens, dtype=np.float64).mean(axis=0)


def init_params(d_v: int, d_model: int, rng: np.random.Generator, heads: int = 8,
                hidden: int = None) -> Params:
    if d_v % heads:
        raise ShapeError(f"heads={heads} does not divide d_v={d_v}")
    hidden = hidden or d_v
    s = 1.0 / np.sqrt(d_v)
    return {
        "w_q": rng.normal(0.0, s, (d_v, d_v)),
        "w_k": rng.normal(0.0, s, (d_v, d_v)),
        "w_v": rng.normal(0.0, s, (d_v, d_v)),
        "w_o": rng.normal(0.0, s, (d_v, d_v)),
        "b_o": np.zeros(d_v),
        "w1": rng.normal(0.0, 1.0 / np.sqrt(3 * d_v), (3 * d_v, hidden)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, d_model)),
        "b2": np.zeros(d_model),
    }


def _split(x, heads):
    # (..., L, Dv) -> (..., H, L, dk)
    *lead, n, d = x.shape
    return np.moveaxis(x.reshape(*lead, n, heads, d // heads), -2, -3)


def _merge(x):
    # (..., H, L, dk) -> (..., L, H*dk)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*x.shape[:-2], -1)


def _activate(x, activation):
    if activation == "gelu":
        return gelu(x)
    if activation == "linear":
        return x
    raise ValueError(f"unknown activation {activation!r}")


def _activate_grad(x, activation):
    return gelu_grad(x) if activation == "gelu" else np.ones_like(x)


def attention_weights(query, keys, params: Params, heads: int) -> np.ndarray:
    """Softmax(Q K^T / sqrt(d_k)) per head, shape ``(..., H, M, N_v)``."""
    q = _split(np.asarray(query) @ params["w_q"], heads)
    k = _split(np.asarray(keys) @ params["w_k"], heads)
    dk = q.shape[-1]
    return softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(dk), axis=-1)


def mhca(query, keys_values, params: Params, heads: int = 8) -> np.ndarray:
    """Cross-attention of one ``(D_v,)`` query over ``(N_v, D_v)`` patch tokens."""
    query = np.asarray(query, dtype=np.float64)
    kv = np.asarray(keys_values, dtype=np.float64)
    d_v = params["w_q"].shape[0]
    if query.shape != (d_v,) or kv.ndim != 2 or kv.shape[1] != d_v:
        raise ShapeError(f"mhca shapes {query.shape} / {kv.shape} do not match d_v={d_v}")
    if d_v % heads:
        raise ShapeError(f"heads={heads} does not divide d_v={d_v}")
    alpha = attention_weights(query[None], kv, params, heads)
    v = _split(kv @ params["w_v"], heads)
    return (_merge(alpha @ v) @ params["w_o"] + params["b_o"])[0]


def fuse_region(f_hat, f_loc, f_glob, params: Params, activation: str = "gelu") -> np.ndarray:
    """Two-layer MLP over the concatenation ``(f_hat, f_loc, f_glob)``."""
    parts = [np.asarray(p, dtype=np.float64) for p in (f_hat, f_loc, f_glob)]
    if len({p.shape for p in parts}) != 1 or 3 * parts[0].shape[-1] != params["w1"].shape[0]:
        raise ShapeError("fuse_region inputs must share length d_v matching w1")
    z = np.concatenate(parts, axis=-1)
    return _activate(z @ params["w1"] + params["b1"], activation) @ params["w2"] + params["b2"]


class HgaCache(NamedTuple):
    tokens: np.ndarray
    pool: np.ndarray
    f_loc: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    alpha: np.ndarray
    attended: np.ndarray
    z: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    heads: int
    activation: str
    squeeze: bool


def forward(tokens, pool, params: Params, heads: int = 8, activation: str = "gelu",
            return_cache: bool = False):
    """Region tokens for a batch of frames.

    ``tokens`` is ``(F, N_v, D_v)`` (or ``(N_v, D_v)`` for one frame) and
    ``pool`` the matching ``(F, M, N_v)`` weights from :func:`pooling_matrix`.
    Returns ``(F, M, D)``.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    pool = np.asarray(pool, dtype=np.float64)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens, pool = tokens[None], pool[None]
    d_v = params["w_q"].shape[0]
    if tokens.ndim != 3 or tokens.shape[-1] != d_v:
        raise ShapeError(f"expected (F, N_v, {d_v}) tokens, got {tokens.shape}")
    if pool.shape[0] != tokens.shape[0] or pool.shape[-1] != tokens.shape[1]:
        raise ShapeError(f"pooling weights {pool.shape} do not match tokens {tokens.shape}")
    if d_v % heads:
        raise ShapeError(f"heads={heads} does not divide d_v={d_v}")
    check_finite("patch tokens", tokens)

    f_loc = pool @ tokens  # (F, M, Dv)
    f_glob = tokens.mean(axis=1)  # (F, Dv)
    q = _split(f_loc @ params["w_q"], heads)  # (F, H, M, dk)
    k = _split(tokens @ params["w_k"], heads)  # (F, H, Nv, dk)
    v = _split(tokens @ params["w_v"], heads)
    dk = q.shape[-1]
    alpha = softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(dk), axis=-1)  # (F, H, M, Nv)
    attended = _merge(alpha @ v)  # (F, M, Dv)
    f_hat = attended @ params["w_o"] + params["b_o"]
    glob = np.broadcast_to(f_glob[:, None, :], f_loc.shape)
    z = np.concatenate([f_hat, f_loc, glob], axis=-1)
    a1 = z @ params["w1"] + params["b1"]
    h1 = _activate(a1, activation)
    out = h1 @ params["w2"] + params["b2"]
    check_finite("HGA output", out)
    res = out[0] if squeeze else out
    if not return_cache:
        return res
    return res, HgaCache(tokens, pool, f_loc, q, k, v, alpha, attended, z, a1, h1,
                         heads, activation, squeeze)


def hga_forward(tokens, landmarks, roi: RoiSpec, params: Params, grid_dims, frame_dims,
                heads: int = 8, activation: str = "gelu") -> np.ndarray:
    """Aligned ``(M, D)`` representation of a single frame."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[0] != grid_dims[0] * grid_dims[1]:
        raise ShapeError(f"{tokens.shape[0]} tokens for a {grid_dims} grid")
    pool = pooling_matrix(landmarks, roi, grid_dims, frame_dims)
    return forward(tokens, pool, params, heads=heads, activation=activation)


def backward(cache: HgaCache, grad_out, params: Params):
    """Gradients of ``sum(grad_out * out)``; returns ``(param_grads, grad_tokens)``."""
    if cache is None:
        raise ValueError("backward needs the cache returned by forward(return_cache=True)")
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.squeeze:
        g = g[None]
    d_v = params["w_q"].shape[0]
    grads = {}
    grads["w2"] = np.einsum("fmh,fmd->hd", cache.h1, g)
    grads["b2"] = g.sum(axis=(0, 1))
    g_a1 = (g @ params["w2"].T) * _activate_grad(cache.a1, cache.activation)
    grads["w1"] = np.einsum("fmi,fmh->ih", cache.z, g_a1)
    grads["b1"] = g_a1.sum(axis=(0, 1))
    g_z = g_a1 @ params["w1"].T
    g_hat, g_loc, g_glob = g_z[..., :d_v], g_z[..., d_v:2 * d_v], g_z[..., 2 * d_v:].sum(axis=1)

    grads["w_o"] = np.einsum("fmi,fmo->io", cache.attended, g_hat)
    grads["b_o"] = g_hat.sum(axis=(0, 1))
    g_att = _split(g_hat @ params["w_o"].T, cache.heads)  # (F, H, M, dk)

    alpha, q, k, v = cache.alpha, cache.q, cache.k, cache.v
    dk = q.shape[-1]
    g_alpha = g_att @ np.swapaxes(v, -1, -2)  # (F, H, M, Nv)
    g_v = np.swapaxes(alpha, -1, -2) @ g_att  # (F, H, Nv, dk)
    g_logits = alpha * (g_alpha - (g_alpha * alpha).sum(axis=-1, keepdims=True)) / np.sqrt(dk)
    g_q = g_logits @ k
    g_k = np.swapaxes(g_logits, -1, -2) @ q

    tokens = cache.tokens
    g_qm, g_km, g_vm = _merge(g_q), _merge(g_k), _merge(g_v)
    grads["w_q"] = np.einsum("fmi,fmo->io", cache.f_loc, g_qm)
    grads["w_k"] = np.einsum("fni,fno->io", tokens, g_km)
    grads["w_v"] = np.einsum("fni,fno->io", tokens, g_vm)
    g_loc = g_loc + g_qm @ params["w_q"].T

    g_tokens = g_km @ params["w_k"].T + g_vm @ params["w_v"].T
    g_tokens += np.swapaxes(cache.pool, -1, -2) @ g_loc
    g_tokens += g_glob[:, None, :] / tokens.shape[1]
    if cache.squeeze:
        g_tokens = g_tokens[0]
    return grads, g_tokens
