"""Synthetic audio-visual AU sequences with planted, testable structure.

Each class follows a two-state Markov activation chain calibrated to its
target prevalence. While a class is active, a class-specific vector is added
to the patch tokens under the landmarks of the class's region; every onset is
announced ``audio_lag`` frames early by a class-specific audio burst, and a
weaker class-specific audio tone is present for as long as the class is on.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Tuple

import numpy as np

from . import configfile, container
from .hga import NUM_LANDMARKS, RoiSpec, default_roi_spec, pooling_matrix
from .numeric_core import make_rng

DATASET_MAGIC = "AVSSM-DATASET"
DATASET_VERSION = 1

# region (index into the default RoiSpec) carrying each AU's visual signal
CLASS_ROI = (0, 1, 1, 2, 3, 4, 5, 5, 5, 5, 5, 6)


def geometric_prevalence(first: float = 0.3, last: float = 0.02, n: int = 12) -> Tuple[float, ...]:
    return tuple(float(v) for v in np.geomspace(first, last, n))


@dataclass(frozen=True)
class SynthConfig:
    T: int = 256
    num_sequences: int = 96
    num_classes: int = 12
    prevalence: Tuple[float, ...] = field(default_factory=geometric_prevalence)
    mean_active: float = 12.0
    audio_lag: int = 2
    noise_std: float = 1.0
    signal_amp: float = 2.0
    background_std: float = 0.5
    audio_noise_std: float = 0.5
    burst_amp: float = 2.0
    tone_amp: float = 1.0
    grid_h: int = 8
    grid_w: int = 8
    frame_h: int = 224
    frame_w: int = 224
    d_v: int = 32
    d_a: int = 16
    landmark_jitter: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if len(self.prevalence) != self.num_classes:
            raise ValueError(f"need {self.num_classes} prevalence values, got {len(self.prevalence)}")
        if any(not 0 < p < 1 for p in self.prevalence):
            raise ValueError("prevalence entries must lie in (0, 1)")
        if self.T < self.audio_lag + 1 or self.audio_lag < 0:
            raise ValueError("need 0 <= audio_lag < T")
        if self.num_classes > self.d_v:
            raise ValueError("d_v must be at least num_classes")
        if self.mean_active < 1:
            raise ValueError("mean_active must be >= 1 frame")
        if min(self.num_sequences, self.grid_h, self.grid_w, self.frame_h, self.frame_w,
               self.d_v, self.d_a) < 1:
            raise ValueError("sizes must be positive")
        self.transition_probs()

    @property
    def grid_dims(self):
        return (self.grid_h, self.grid_w)

    @property
    def frame_dims(self):
        return (self.frame_h, self.frame_w)

    def transition_probs(self):
        """Per-class ``(p_on, p_off)`` whose stationary rate equals the prevalence."""
        pi = np.asarray(self.prevalence)
        p_off = np.full_like(pi, 1.0 / self.mean_active)
        p_on = pi * p_off / (1.0 - pi)
        if np.any(p_on > 1.0):
            raise ValueError("prevalence too high for the requested mean activation length")
        return p_on, p_off

    @classmethod
    def from_file(cls, path, preset: str = "default") -> "SynthConfig":
        return configfile.from_mapping(cls, configfile.parse_kv(Path(path).read_text()), base=PRESETS[preset])


# "ablation" weakens both the visual signal and the sustained audio tone so the
# tail classes are hard enough that the choice of loss matters.
PRESETS = {
    "default": SynthConfig(),
    "ablation": SynthConfig(signal_amp=0.8, tone_amp=0.35),
}


@dataclass
class SynthDataset:
    """Stacked sequences. Arrays are float32 as stored on disk."""

    patch_tokens: np.ndarray  # (S, T, N_v, D_v)
    landmarks: np.ndarray  # (S, T, 68, 2)
    audio: np.ndarray  # (S, T, D_a)
    labels: np.ndarray  # (S, T, C)
    grid_dims: Tuple[int, int]
    frame_dims: Tuple[int, int]
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "SynthDataset":
        idx = np.asarray(idx)
        return SynthDataset(self.patch_tokens[idx], self.landmarks[idx], self.audio[idx],
                            self.labels[idx], self.grid_dims, self.frame_dims, self.config)

    def with_audio_zeroed(self) -> "SynthDataset":
        return SynthDataset(self.patch_tokens, self.landmarks, np.zeros_like(self.audio),
                            self.labels, self.grid_dims, self.frame_dims, self.config)

    def summary(self) -> dict:
        prev = self.labels.reshape(-1, self.labels.shape[-1]).mean(axis=0)
        return {
            "sequences": len(self),
            "frames": int(self.labels.shape[0] * self.labels.shape[1]),
            "prevalence": [round(float(p), 6) for p in prev],
        }


def landmark_template(frame_dims=(224, 224)) -> np.ndarray:
    """A frontal 68-point face layout (iBUG ordering) in pixel coordinates."""
    pts = np.zeros((NUM_LANDMARKS, 2))
    th = np.pi - np.pi * np.arange(17) / 16
    pts[0:17] = np.c_[0.5 + 0.38 * np.cos(th), 0.40 + 0.50 * np.sin(th)]
    xs = np.linspace(0.20, 0.42, 5)
    pts[17:22] = np.c_[xs, 0.30 - 0.03 * np.sin(np.pi * (xs - 0.20) / 0.22)]
    pts[22:27] = np.c_[1.0 - xs[::-1], pts[17:22, 1][::-1]]
    pts[27:31] = np.c_[np.full(4, 0.5), np.linspace(0.38, 0.56, 4)]
    pts[31:36] = np.c_[np.linspace(0.42, 0.58, 5), np.full(5, 0.62)]
    ang = np.linspace(np.pi, -np.pi, 6, endpoint=False)
    pts[36:42] = np.c_[0.32 + 0.07 * np.cos(ang), 0.40 + 0.03 * np.sin(ang)]
    pts[42:48] = np.c_[0.68 + 0.07 * np.cos(ang), 0.40 + 0.03 * np.sin(ang)]
    ang = np.linspace(np.pi, -np.pi, 12, endpoint=False)
    pts[48:60] = np.c_[0.5 + 0.15 * np.cos(ang), 0.75 + 0.06 * np.sin(ang)]
    ang = np.linspace(np.pi, -np.pi, 8, endpoint=False)
    pts[60:68] = np.c_[0.5 + 0.10 * np.cos(ang), 0.75 + 0.03 * np.sin(ang)]
    h, w = frame_dims
    return pts * np.array([w, h], dtype=np.float64)


def markov_labels(config: SynthConfig, T: int, rng: np.random.Generator) -> np.ndarray:
    p_on, p_off = config.transition_probs()
    pi = np.asarray(config.prevalence)
    u = rng.random((T, config.num_classes))
    out = np.empty((T, config.num_classes))
    state = u[0] < pi
    out[0] = state
    for t in range(1, T):
        state = np.where(state, u[t] >= p_off, u[t] < p_on)
        out[t] = state
    return out


def onsets(labels: np.ndarray) -> np.ndarray:
    """Boolean ``(T, C)`` marks of 0 -> 1 transitions (frame 0 never counts)."""
    on = np.zeros(labels.shape, dtype=bool)
    on[1:] = (labels[1:] > 0.5) & (labels[:-1] < 0.5)
    return on


class _Shared:
    """Quantities fixed by the seed and shared by all sequences."""

    def __init__(self, config: SynthConfig, roi: RoiSpec):
        rng = make_rng([config.seed, 0])
        n_v = config.grid_h * config.grid_w
        self.background = rng.normal(0.0, config.background_std, (n_v, config.d_v))
        basis, _ = np.linalg.qr(rng.normal(size=(config.d_v, config.num_classes)))
        self.signals = basis.T * config.signal_amp  # (C, D_v), orthogonal rows
        bursts = rng.normal(size=(config.num_classes, config.d_a))
        self.bursts = bursts / np.linalg.norm(bursts, axis=1, keepdims=True) * config.burst_amp
        tones = rng.normal(size=(config.num_classes, config.d_a))
        self.tones = tones / np.linalg.norm(tones, axis=1, keepdims=True) * config.tone_amp
        self.template = landmark_template(config.frame_dims)
        self.class_roi = np.asarray([CLASS_ROI[c % len(CLASS_ROI)] % len(roi)
                                     for c in range(config.num_classes)])


def _sequence(config: SynthConfig, shared: _Shared, roi: RoiSpec, index: int):
    rng = make_rng([config.seed, 1, index])
    T = config.T
    labels = markov_labels(config, T, rng)
    offset = rng.normal(0.0, 3.0, 2)
    landmarks = shared.template[None] + offset + rng.normal(0.0, config.landmark_jitter, (T, NUM_LANDMARKS, 2))
    mask = pooling_matrix(landmarks, roi, config.grid_dims, config.frame_dims) > 0  # (T, M, N_v)
    n_v = config.grid_h * config.grid_w
    tokens = shared.background[None] + rng.normal(0.0, config.noise_std, (T, n_v, config.d_v))
    tokens += np.einsum("tc,tcn,cd->tnd", labels, mask[:, shared.class_roi].astype(np.float64), shared.signals)
    audio = rng.normal(0.0, config.audio_noise_std, (T, config.d_a)) + labels @ shared.tones
    on = onsets(labels)
    on[: config.audio_lag] = False
    ts, cs = np.nonzero(on)
    np.add.at(audio, ts - config.audio_lag, shared.bursts[cs])
    return tokens, landmarks, audio, labels


def generate(config: SynthConfig, roi: RoiSpec = None) -> SynthDataset:
    """Deterministic dataset; sequence ``i`` depends only on ``(seed, i)``."""
    roi = roi or default_roi_spec()
    shared = _Shared(config, roi)
    parts = [_sequence(config, shared, roi, i) for i in range(config.num_sequences)]
    stack = [np.stack(p).astype(np.float32) for p in zip(*parts)]
    cfg = asdict(config)
    cfg["prevalence"] = list(config.prevalence)
    return SynthDataset(*stack, grid_dims=config.grid_dims, frame_dims=config.frame_dims, config=cfg)


def export(dataset: SynthDataset, path) -> None:
    meta = {"grid_dims": list(dataset.grid_dims), "frame_dims": list(dataset.frame_dims),
            "config": dataset.config}
    tensors = {
        "patch_tokens": dataset.patch_tokens.astype(np.float32),
        "landmarks": dataset.landmarks.astype(np.float32),
        "audio": dataset.audio.astype(np.float32),
        "labels": dataset.labels.astype(np.float32),
    }
    container.save(path, DATASET_MAGIC, DATASET_VERSION, tensors, meta)


def load(path) -> SynthDataset:
    tensors, meta = container.load(path, DATASET_MAGIC, DATASET_VERSION)
    missing = {"patch_tokens", "landmarks", "audio", "labels"} - set(tensors)
    if missing:
        raise container.FormatError(f"dataset is missing tensors: {sorted(missing)}")
    ds = SynthDataset(tensors["patch_tokens"], tensors["landmarks"], tensors["audio"], tensors["labels"],
                      grid_dims=tuple(meta["grid_dims"]), frame_dims=tuple(meta["frame_dims"]),
                      config=meta.get("config", {}))
    S, T = ds.labels.shape[:2]
    n_v = ds.grid_dims[0] * ds.grid_dims[1]
    if (ds.patch_tokens.shape[:3] != (S, T, n_v) or ds.landmarks.shape != (S, T, NUM_LANDMARKS, 2)
            or ds.audio.shape[:2] != (S, T)):
        raise container.FormatError("dataset tensors have inconsistent shapes")
    return ds
