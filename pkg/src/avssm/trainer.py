"""AdamW, warmup + cosine schedule, SWA, checkpoints and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import configfile, container, network
from .hga import RoiSpec, default_roi_spec, parse_roi_spec, pooling_matrix
from .losses import AslConfig, asl_loss, f1_scores, metric_record
from .numeric_core import NonFiniteError, ShapeError, make_rng
from .synth import SynthDataset

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "AVSSM-CHECKPOINT"
CHECKPOINT_VERSION = 1
Params = Dict[str, np.ndarray]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 2e-4
    lr_foundation: float = 1e-5  # kept for config compatibility; no foundation weights here
    lr_min_ratio: float = 0.01
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    warmup_epochs: int = 5
    total_epochs: int = 30
    batch_size: int = 16
    clip_len: int = 256
    swa_start_epoch: int = 25
    val_fraction: float = 0.25
    seed: int = 0
    loss: str = "asl"
    gamma_pos: float = 1.0
    gamma_neg: float = 4.0
    margin: float = 0.05
    threshold: float = 0.5
    temporal: str = "agssm"
    d_model: int = 32
    state_dim: int = 16
    heads: int = 8
    layers: int = 1
    chunk: int = 64
    eval_batch: int = 8

    def __post_init__(self):
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if not 0 <= self.swa_start_epoch <= self.total_epochs:
            raise ValueError("need 0 <= swa_start_epoch <= total_epochs")
        if self.loss not in ("asl", "bce", "focal"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.temporal not in network.TEMPORAL_KINDS:
            raise ValueError(f"unknown temporal model {self.temporal!r}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if min(self.batch_size, self.clip_len, self.d_model, self.state_dim, self.heads,
               self.layers, self.chunk, self.eval_batch) < 1:
            raise ValueError("sizes must be positive")

    @property
    def lr_min(self) -> float:
        return self.lr_peak * self.lr_min_ratio

    def asl_config(self, num_classes: int = 12) -> AslConfig:
        if self.loss == "asl":
            return AslConfig(self.gamma_pos, self.gamma_neg, self.margin, num_classes)
        return AslConfig.for_loss(self.loss, num_classes)

    @classmethod
    def from_file(cls, path, preset: str = "full") -> "TrainConfig":
        return configfile.from_mapping(cls, configfile.parse_kv(Path(path).read_text()), base=PRESETS[preset])


# The class defaults are the large-scale recipe. At desk scale (a few dozen
# clips, a few steps per epoch) that learning rate barely moves the weights, so
# "desk" trades batch size for more, larger steps.
PRESETS = {
    "full": TrainConfig(),
    "desk": TrainConfig(lr_peak=8e-3, batch_size=4, warmup_epochs=2, total_epochs=20, swa_start_epoch=15),
}


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: Params
    v: Params
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adamw_step(params: Params, grads: Params, state: AdamState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_grad_norm(grads: Params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup from 0 to ``lr_peak``, then cosine decay to ``lr_min``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    warm = config.warmup_epochs * steps_per_epoch
    total = config.total_epochs * steps_per_epoch
    if step < warm:
        return config.lr_peak * step / warm
    frac = min(1.0, (step - warm) / max(1, total - warm))
    return config.lr_min + 0.5 * (config.lr_peak - config.lr_min) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------- SWA

@dataclass
class SwaState:
    avg: Params = field(default_factory=dict)
    n_models: int = 0


def swa_update(state: SwaState, snapshot: Params) -> SwaState:
    """Running mean ``avg <- (avg * n + snapshot) / (n + 1)``."""
    if state.n_models == 0:
        return SwaState({k: np.array(v, dtype=np.float64, copy=True) for k, v in snapshot.items()}, 1)
    if set(snapshot) != set(state.avg):
        raise ShapeError("snapshot parameters differ from the SWA average")
    n = state.n_models
    avg = {}
    for k, v in snapshot.items():
        if v.shape != state.avg[k].shape:
            raise ShapeError(f"snapshot {k} has shape {v.shape}, average {state.avg[k].shape}")
        avg[k] = (state.avg[k] * n + v) / (n + 1)
    return SwaState(avg, n + 1)


# --------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    params: Params
    adam: AdamState
    swa: SwaState
    config: TrainConfig
    dims: dict
    roi: RoiSpec = field(default_factory=default_roi_spec)
    history: List[dict] = field(default_factory=list)
    best_val: float = -1.0
    epoch_losses: List[float] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.adam.step

    def model_params(self, use_swa: bool = False) -> Params:
        if use_swa:
            if self.swa.n_models == 0:
                raise ValueError("checkpoint has no SWA snapshots")
            return self.swa.avg
        return self.params

    def to_bytes(self) -> bytes:
        tensors = {}
        for k in sorted(self.params):
            tensors[f"param/{k}"] = self.params[k]
            tensors[f"adam_m/{k}"] = self.adam.m[k]
            tensors[f"adam_v/{k}"] = self.adam.v[k]
        for k in sorted(self.swa.avg):
            tensors[f"swa/{k}"] = self.swa.avg[k]
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "dims": self.dims,
            "roi": self.roi.to_text(),
            "step": self.adam.step,
            "swa_n_models": self.swa.n_models,
            "history": self.history,
            "best_val": self.best_val,
            "epoch_losses": self.epoch_losses,
            "rng": {"algorithm": "PCG64", "seed": self.config.seed, "step": self.adam.step},
        }
        return container.dumps(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, tensors, meta)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        tensors, meta = container.loads(data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        groups: Dict[str, Params] = {"param": {}, "adam_m": {}, "adam_v": {}, "swa": {}}
        for name, arr in tensors.items():
            kind, key = name.split("/", 1)
            if kind not in groups:
                raise container.FormatError(f"unexpected tensor {name!r}")
            groups[kind][key] = arr.astype(np.float64)
        if set(groups["adam_m"]) != set(groups["param"]) or set(groups["adam_v"]) != set(groups["param"]):
            raise container.FormatError("optimizer state does not match parameters")
        config = configfile.from_mapping(TrainConfig, {k: tuple(v) if isinstance(v, list) else v
                                                        for k, v in meta["config"].items()})
        return cls(
            params=groups["param"],
            adam=AdamState(groups["adam_m"], groups["adam_v"], int(meta["step"])),
            swa=SwaState(groups["swa"], int(meta["swa_n_models"])),
            config=config,
            dims=meta["dims"],
            roi=parse_roi_spec(meta["roi"]),
            history=meta["history"],
            best_val=float(meta["best_val"]),
            epoch_losses=[float(x) for x in meta.get("epoch_losses", [])],
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------ data plumbing

def dataset_dims(ds: SynthDataset) -> dict:
    return {
        "d_v": int(ds.patch_tokens.shape[-1]),
        "d_a": int(ds.audio.shape[-1]),
        "num_classes": int(ds.labels.shape[-1]),
        "grid_dims": list(ds.grid_dims),
        "frame_dims": list(ds.frame_dims),
    }


def split_indices(n: int, config: TrainConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded train/held-out split of sequence indices."""
    perm = make_rng([config.seed, 7]).permutation(n)
    n_val = max(1, int(round(n * config.val_fraction)))
    if n_val >= n:
        raise ValueError("dataset too small for a held-out split")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _clips(n_seq: int, T: int, clip_len: int) -> List[Tuple[int, int]]:
    L = min(clip_len, T)
    return [(i, s) for i in range(n_seq) for s in range(0, T - L + 1, L)]


def _batch(ds: SynthDataset, items, clip_len: int, roi: RoiSpec):
    L = min(clip_len, ds.labels.shape[1])
    seq = np.array([i for i, _ in items])
    sl = [slice(s, s + L) for _, s in items]
    tok = np.stack([ds.patch_tokens[i, w] for i, w in zip(seq, sl)]).astype(np.float64)
    lm = np.stack([ds.landmarks[i, w] for i, w in zip(seq, sl)])
    aud = np.stack([ds.audio[i, w] for i, w in zip(seq, sl)]).astype(np.float64)
    lab = np.stack([ds.labels[i, w] for i, w in zip(seq, sl)]).astype(np.float64)
    pool = pooling_matrix(lm, roi, ds.grid_dims, ds.frame_dims)
    return tok, pool, aud, lab


def check_compatible(dims: dict, ds: SynthDataset) -> None:
    got = dataset_dims(ds)
    for k in ("d_v", "d_a", "num_classes", "grid_dims"):
        if got[k] != dims[k]:
            raise ShapeError(f"dataset {k}={got[k]} does not match model {k}={dims[k]}")


def predict_proba(params: Params, ds: SynthDataset, config: TrainConfig, roi: RoiSpec = None) -> np.ndarray:
    """Per-frame probabilities ``(S, T, C)`` over whole sequences."""
    roi = roi or default_roi_spec()
    S, T = ds.labels.shape[:2]
    out = np.empty((S, T, ds.labels.shape[-1]))
    for start in range(0, S, config.eval_batch):
        idx = range(start, min(S, start + config.eval_batch))
        tok, pool, aud, _ = _batch(ds, [(i, 0) for i in idx], T, roi)
        out[start:start + len(idx)] = network.forward(params, tok, pool, aud, heads=config.heads,
                                                      chunk=config.chunk)
    return out


def evaluate(checkpoint: Checkpoint, dataset: SynthDataset, use_swa: bool = False,
             threshold: Optional[float] = None) -> dict:
    """Per-AU and macro F1 of the checkpoint (or its SWA average) on ``dataset``."""
    check_compatible(checkpoint.dims, dataset)
    params = checkpoint.model_params(use_swa)
    probs = predict_proba(params, dataset, checkpoint.config, checkpoint.roi)
    thr = checkpoint.config.threshold if threshold is None else threshold
    per, macro = f1_scores(probs, dataset.labels, thr)
    return metric_record(per, macro, use_swa=bool(use_swa), frames=int(probs.shape[0] * probs.shape[1]))


# ---------------------------------------------------------------- training

def new_checkpoint(config: TrainConfig, dataset: SynthDataset, roi: RoiSpec = None) -> Checkpoint:
    dims = dataset_dims(dataset)
    rng = make_rng([config.seed, 1])
    params = network.init_network(rng, d_v=dims["d_v"], d_a=dims["d_a"], num_classes=dims["num_classes"],
                                  d_model=config.d_model, state_dim=config.state_dim, heads=config.heads,
                                  layers=config.layers, temporal=config.temporal)
    return Checkpoint(params, AdamState.zeros_like(params), SwaState(), config, dims, roi or default_roi_spec())


def _copy(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def train(config: TrainConfig, dataset: SynthDataset, out_dir=None, resume: Checkpoint = None,
          stop_after_steps: Optional[int] = None, roi: RoiSpec = None, progress=None):
    """Train on the seeded training split; returns ``(final_checkpoint, history)``.

    Batch order in epoch ``e`` is a permutation drawn from ``(seed, e)``, so a
    run resumed from any checkpoint replays the exact same updates.
    ``stop_after_steps`` ends the run early (used for resumption checks).
    """
    if resume is not None:
        ckpt = Checkpoint(_copy(resume.params),
                          AdamState(_copy(resume.adam.m), _copy(resume.adam.v), resume.adam.step),
                          SwaState(_copy(resume.swa.avg), resume.swa.n_models),
                          resume.config, dict(resume.dims), resume.roi, list(resume.history), resume.best_val,
                          list(resume.epoch_losses))
        config = ckpt.config
        check_compatible(ckpt.dims, dataset)
    else:
        ckpt = new_checkpoint(config, dataset, roi)
    roi = ckpt.roi
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    train_idx, val_idx = split_indices(len(dataset), config)
    train_ds, val_ds = dataset.subset(train_idx), dataset.subset(val_idx)
    clips = _clips(len(train_ds), train_ds.labels.shape[1], config.clip_len)
    spe = -(-len(clips) // config.batch_size)
    total_steps = spe * config.total_epochs
    loss_cfg = config.asl_config(ckpt.dims["num_classes"])
    end = total_steps if stop_after_steps is None else min(total_steps, stop_after_steps)

    params, adam = ckpt.params, ckpt.adam
    epoch_losses = ckpt.epoch_losses
    while adam.step < end:
        epoch, pos = divmod(adam.step, spe)
        order = make_rng([config.seed, 2, epoch]).permutation(len(clips))
        batch_ids = order[pos * config.batch_size:(pos + 1) * config.batch_size]
        tok, pool, aud, lab = _batch(train_ds, [clips[i] for i in batch_ids], config.clip_len, roi)
        probs, cache = network.forward(params, tok, pool, aud, heads=config.heads, chunk=config.chunk,
                                       return_cache=True)
        loss, g_probs = asl_loss(probs, lab, loss_cfg)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {adam.step} (epoch {epoch}, batch {pos})")
        grads = network.backward(params, cache, g_probs)
        clip_grad_norm(grads, config.grad_clip)
        adamw_step(params, grads, adam, lr_at(adam.step + 1, config, spe), config.beta1, config.beta2,
                   config.adam_eps, config.weight_decay)
        epoch_losses.append(loss)

        if adam.step % spe == 0:
            rec = _end_of_epoch(ckpt, train_ds, val_ds, epoch, spe, epoch_losses)
            epoch_losses.clear()
            if progress is not None:
                progress(rec)
            log.info("epoch %d: %s", epoch, json.dumps(rec))
            if out is not None:
                if rec["improved"]:
                    ckpt.save(out / "best.ckpt")
                with open(out / "history.jsonl", "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if out is not None:
        ckpt.save(out / "final.ckpt")
    return ckpt, ckpt.history


def _end_of_epoch(ckpt: Checkpoint, train_ds, val_ds, epoch: int, spe: int, losses) -> dict:
    config = ckpt.config
    if epoch + 1 > config.swa_start_epoch:
        ckpt.swa = swa_update(ckpt.swa, ckpt.params)
    tr = f1_scores(predict_proba(ckpt.params, train_ds, config, ckpt.roi), train_ds.labels, config.threshold)
    va = f1_scores(predict_proba(ckpt.params, val_ds, config, ckpt.roi), val_ds.labels, config.threshold)
    rec = {
        "epoch": epoch,
        "step": ckpt.adam.step,
        "lr": lr_at(ckpt.adam.step, config, spe),
        "train_loss": float(np.mean(losses)) if losses else float("nan"),
        "train_macro_f1": tr[1],
        "val_macro_f1": va[1],
        "swa_n_models": ckpt.swa.n_models,
    }
    if ckpt.swa.n_models:
        vs = f1_scores(predict_proba(ckpt.swa.avg, val_ds, config, ckpt.roi), val_ds.labels, config.threshold)
        rec["val_macro_f1_swa"] = vs[1]
    rec["improved"] = va[1] > ckpt.best_val
    if rec["improved"]:
        ckpt.best_val = va[1]
    ckpt.history.append(rec)
    return rec


def held_out(dataset: SynthDataset, config: TrainConfig) -> SynthDataset:
    return dataset.subset(split_indices(len(dataset), config)[1])


def training_split(dataset: SynthDataset, config: TrainConfig) -> SynthDataset:
    return dataset.subset(split_indices(len(dataset), config)[0])
