"""Single-pair guided diffusion noise synthesis."""

from .data import PairDataset, ToyNoiseSpec, apply_toy_noise, load_dataset, make_toy_dataset
from .losses import LossWeights, refine_loss, soft_histogram
from .model import GuidedNoiseNet, ModelConfig
from .schedule import DiffusionSchedule, build_schedule
from .synthesis import SynthesisRequest, self_augment, synthesize, synthesize_tiled
from .training import TrainConfig, Trainer, load_model, train

__version__ = "0.1.0"

__all__ = [
    "DiffusionSchedule", "GuidedNoiseNet", "LossWeights", "ModelConfig", "PairDataset",
    "SynthesisRequest", "ToyNoiseSpec", "TrainConfig", "Trainer", "apply_toy_noise",
    "build_schedule", "load_dataset", "load_model", "make_toy_dataset", "refine_loss",
    "self_augment", "soft_histogram", "synthesize", "synthesize_tiled", "train",
]
