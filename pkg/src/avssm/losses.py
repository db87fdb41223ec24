"""Asymmetric multi-label loss with probability shifting, and F1 metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from .numeric_core import ShapeError

AU_NAMES = ("AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26")


@dataclass(frozen=True)
class AslConfig:
    gamma_pos: float = 1.0
    gamma_neg: float = 4.0
    margin: float = 0.05
    num_classes: int = 12
    clamp_eps: float = 1e-8

    def __post_init__(self):
        if not (self.gamma_neg >= self.gamma_pos >= 0):
            raise ValueError("need gamma_neg >= gamma_pos >= 0")
        if not (0 <= self.margin < 1):
            raise ValueError("margin must lie in [0, 1)")
        if not (0 < self.clamp_eps < 0.5):
            raise ValueError("clamp_eps must lie in (0, 0.5)")

    @classmethod
    def for_loss(cls, kind: str, num_classes: int = 12, **overrides) -> "AslConfig":
        """Loss presets: ``asl`` (defaults), ``bce`` and ``focal`` (gamma 2, no margin)."""
        if kind == "asl":
            return cls(num_classes=num_classes, **overrides)
        if kind == "bce":
            return cls(0.0, 0.0, 0.0, num_classes)
        if kind == "focal":
            return cls(2.0, 2.0, 0.0, num_classes)
        raise ValueError(f"unknown loss {kind!r}")


def asl_loss(probs, labels, cfg: AslConfig = AslConfig()) -> Tuple[float, np.ndarray]:
    """Mean asymmetric loss over frames and its gradient w.r.t. ``probs``.

    ``probs`` and ``labels`` are ``(..., C)``. Each frame contributes
    ``-(1/C) * sum(y * L_pos + (1 - y) * L_neg)`` and frames are averaged.
    The gradient at the ``p == margin`` kink is taken as 0.
    """
    p_raw = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p_raw.shape != y.shape:
        raise ShapeError(f"probs {p_raw.shape} and labels {y.shape} differ")
    if p_raw.shape[-1] != cfg.num_classes:
        raise ShapeError(f"expected {cfg.num_classes} classes, got {p_raw.shape[-1]}")
    if np.any(~np.isfinite(p_raw)) or np.any(p_raw < 0) or np.any(p_raw > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    eps = cfg.clamp_eps
    p = np.clip(p_raw, eps, 1.0 - eps)
    inside = (p_raw > eps) & (p_raw < 1.0 - eps)

    gp, gn, m = cfg.gamma_pos, cfg.gamma_neg, cfg.margin
    log_p = np.log(p)
    l_pos = (1.0 - p) ** gp * log_p
    d_pos = (1.0 - p) ** gp / p
    if gp:
        d_pos -= gp * (1.0 - p) ** (gp - 1.0) * log_p

    # the margin acts on the raw probability so that p <= m is exactly zero
    # even where clamping would nudge p above a zero margin
    pm = np.clip(p_raw - m, 0.0, 1.0 - eps)
    active = (pm > 0) & (p_raw - m < 1.0 - eps)
    log_1m = np.log1p(-pm)
    l_neg = pm**gn * log_1m
    safe_pm = np.where(active, pm, 1.0)
    d_neg = -(pm**gn) / (1.0 - pm)
    if gn:
        d_neg += gn * safe_pm ** (gn - 1.0) * log_1m
    d_neg = np.where(active, d_neg, 0.0)

    n_frames = p.size // cfg.num_classes
    scale = -1.0 / (cfg.num_classes * n_frames)
    loss = scale * float(np.sum(y * l_pos + (1.0 - y) * l_neg)) + 0.0  # no negative zero
    grad = scale * (y * d_pos * inside + (1.0 - y) * d_neg)
    return loss, grad


def bce(probs, labels, eps: float = 1e-8) -> float:
    """Plain mean binary cross-entropy, same clamping and reduction as :func:`asl_loss`."""
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def f1_scores(pred_probs, labels, threshold: float = 0.5) -> Tuple[np.ndarray, float]:
    """Per-class F1 ``2TP / (2TP + FP + FN)`` (0 when undefined) and its mean."""
    p = np.asarray(pred_probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} and labels {y.shape} differ")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    pred = p.reshape(-1, p.shape[-1]) >= threshold
    truth = y.reshape(-1, y.shape[-1]) > 0.5
    tp = np.sum(pred & truth, axis=0)
    fp = np.sum(pred & ~truth, axis=0)
    fn = np.sum(~pred & truth, axis=0)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return f1, float(f1.mean())


def metric_record(per_class: np.ndarray, macro: float, names: Sequence[str] = AU_NAMES, **extra) -> Dict:
    rec = {"macro_f1": float(macro)}
    rec.update({f"f1_{n}": float(v) for n, v in zip(names, per_class)})
    rec.update(extra)
    return rec


def format_report(record: Dict) -> str:
    """Key-value lines followed by the record as one JSON line."""
    lines = [f"{k} = {v:.6f}" if isinstance(v, float) else f"{k} = {v}" for k, v in record.items()]
    lines.append(json.dumps(record, sort_keys=True))
    return "\n".join(lines)

