"""Wall-clock scaling of the AG-SSM layer against full self-attention.

The attention baseline is single-head softmax self-attention over all ``T``
frames in float32, evaluated in row blocks so its memory stays ``O(block * T)``
while its work stays ``O(T^2)``.
"""

from __future__ import annotations

import statistics
import time
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import ag_ssm
from .numeric_core import make_rng

DEFAULT_LENGTHS = (1024, 2048, 4096, 8192, 16384)


def attention_forward(x: np.ndarray, w_q, w_k, w_v, block: int = 512) -> np.ndarray:
    """``softmax(Q K^T / sqrt(d)) V`` for ``x`` of shape ``(T, d)``."""
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    scale = np.float32(1.0 / np.sqrt(x.shape[1]))
    out = np.empty_like(v)
    for s in range(0, x.shape[0], block):
        logits = (q[s:s + block] @ k.T) * scale
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=1, keepdims=True)
        out[s:s + block] = logits @ v
    return out


def _median_time(fn: Callable[[], object], repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def run(lengths: Sequence[int] = DEFAULT_LENGTHS, baseline: str = "attention", repeats: int = 5,
        d_model: int = 16, state_dim: int = 16, chunk: Optional[int] = 64, seed: int = 0) -> List[Dict]:
    """One record per length: median seconds for each model and the doubling ratio.

    ``ratio`` fields compare against the previous row and are only meaningful
    when consecutive lengths double. A ``MemoryError`` is recorded as ``"oom"``.
    """
    lengths = [int(t) for t in lengths]
    if any(t < 1 for t in lengths) or lengths != sorted(lengths):
        raise ValueError("lengths must be positive and ascending")
    if baseline not in ("attention", "none"):
        raise ValueError("baseline must be 'attention' or 'none'")
    rng = make_rng([seed, 5])
    params = ag_ssm.init_params(d_model, state_dim, rng)
    wq, wk, wv = (rng.normal(0.0, d_model**-0.5, (d_model, d_model)).astype(np.float32) for _ in range(3))
    rows: List[Dict] = []
    prev: Dict = {}
    for T in lengths:
        x_v = rng.normal(size=(T, d_model))
        x_a = rng.normal(size=(T, d_model))
        row: Dict = {"T": T, "repeats": repeats}
        try:
            row["agssm_s"] = _median_time(lambda: ag_ssm.forward(x_v, x_a, params, chunk=chunk), repeats)
        except MemoryError:
            row["agssm_s"] = "oom"
        if baseline == "attention":
            x32 = x_v.astype(np.float32)
            try:
                row["attention_s"] = _median_time(lambda: attention_forward(x32, wq, wk, wv), repeats)
            except MemoryError:
                row["attention_s"] = "oom"
        for key in ("agssm_s", "attention_s"):
            if key not in row:
                continue
            a, b = prev.get(key), row[key]
            ok = isinstance(a, float) and isinstance(b, float) and a > 0
            row[key.replace("_s", "_ratio")] = b / a if ok else None
        rows.append(row)
        prev = row
    return rows
