"""Audio-guided selective state-space models for per-frame facial action unit detection."""

from .estimator import AuDetector
from .hga import RoiSpec, default_roi_spec
from .losses import AU_NAMES, AslConfig, asl_loss, f1_scores
from .synth import SynthConfig, SynthDataset
from .trainer import Checkpoint, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AU_NAMES",
    "AslConfig",
    "AuDetector",
    "Checkpoint",
    "RoiSpec",
    "SynthConfig",
    "SynthDataset",
    "TrainConfig",
    "asl_loss",
    "default_roi_spec",
    "f1_scores",
]
