"""scikit-learn style wrapper around the trainer.

``X`` is a :class:`~avssm.synth.SynthDataset` (patch tokens, landmarks and
audio for ``S`` sequences). ``y`` defaults to the dataset's own labels; when
given it must be an ``(S, T, C)`` array of 0/1 targets.
"""

from __future__ import annotations

from dataclasses import fields, replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import trainer
from .losses import f1_scores
from .numeric_core import ShapeError
from .synth import SynthDataset


class AuDetector(ClassifierMixin, BaseEstimator):
    """Per-frame multi-label AU detector.

    Hyperparameters mirror :class:`~avssm.trainer.TrainConfig`. ``fit`` runs
    the trainer, which keeps a seeded ``val_fraction`` of the sequences aside
    for its per-epoch validation record (``history_``).
    """

    def __init__(self, temporal="agssm", loss="asl", lr_peak=8e-3, weight_decay=1e-4, warmup_epochs=2,
                 total_epochs=20, batch_size=4, val_fraction=0.25, swa_start_epoch=15, d_model=32,
                 state_dim=16, heads=8, layers=1, gamma_pos=1.0, gamma_neg=4.0, margin=0.05,
                 threshold=0.5, use_swa=True, seed=0):
        self.temporal = temporal
        self.loss = loss
        self.lr_peak = lr_peak
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.total_epochs = total_epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.swa_start_epoch = swa_start_epoch
        self.d_model = d_model
        self.state_dim = state_dim
        self.heads = heads
        self.layers = layers
        self.gamma_pos = gamma_pos
        self.gamma_neg = gamma_neg
        self.margin = margin
        self.threshold = threshold
        self.use_swa = use_swa
        self.seed = seed

    def _config(self) -> trainer.TrainConfig:
        names = {f.name for f in fields(trainer.TrainConfig)}
        return trainer.TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    @staticmethod
    def _check_X(X) -> SynthDataset:
        if not isinstance(X, SynthDataset):
            raise TypeError(f"X must be a SynthDataset, got {type(X).__name__}")
        return X

    def fit(self, X, y=None):
        ds = self._check_X(X)
        if y is not None:
            y = np.asarray(y, dtype=np.float32)
            if y.shape != ds.labels.shape:
                raise ShapeError(f"y shape {y.shape} != label shape {ds.labels.shape}")
            ds = replace(ds, labels=y)
        config = self._config()
        self.checkpoint_, self.history_ = trainer.train(config, ds)
        self.classes_ = np.arange(ds.labels.shape[-1])
        self.n_features_in_ = ds.patch_tokens.shape[-1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        ds = self._check_X(X)
        trainer.check_compatible(self.checkpoint_.dims, ds)
        use_swa = self.use_swa and self.checkpoint_.swa.n_models > 0
        params = self.checkpoint_.model_params(use_swa)
        return trainer.predict_proba(params, ds, self.checkpoint_.config, self.checkpoint_.roi)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.int64)

    def score(self, X, y=None, sample_weight=None) -> float:
        """Macro-F1 over all frames."""
        ds = self._check_X(X)
        labels = ds.labels if y is None else np.asarray(y)
        return f1_scores(self.predict_proba(ds), labels, self.threshold)[1]
