from .ablation import TABLE3_GRID, AblationReport, run_ablation
from .augment import AugmentConfig, affine, augment
from .data import DatasetManifest, ManifestItem, check_disjoint, generate_phantom_dataset
from .evaluate import evaluate
from .train import TrainConfig, TrainResult, simulate, train

__all__ = [
    "TABLE3_GRID",
    "AblationReport",
    "AugmentConfig",
    "DatasetManifest",
    "ManifestItem",
    "TrainConfig",
    "TrainResult",
    "affine",
    "augment",
    "check_disjoint",
    "evaluate",
    "generate_phantom_dataset",
    "run_ablation",
    "simulate",
    "train",
]
