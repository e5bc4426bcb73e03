"""DualMatch: semi-supervised learning with prediction/embedding interaction."""

from .augment import AugmentPolicy
from .config import ExperimentConfig, load_config, run_experiment
from .data import Dataset, make_blobs, make_imbalanced_split, split_ssl
from .model import Arch, forward, init_params
from .trainer import TrainConfig, ablation_variants, train

__all__ = [
    "Arch",
    "AugmentPolicy",
    "Dataset",
    "ExperimentConfig",
    "TrainConfig",
    "ablation_variants",
    "forward",
    "init_params",
    "load_config",
    "make_blobs",
    "make_imbalanced_split",
    "run_experiment",
    "split_ssl",
    "train",
]
