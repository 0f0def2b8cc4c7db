from .adam import Adam, OptimizerError, exp_schedule
from .config import DensifyConfig, TrainConfig
from .densify import densify_and_prune, scene_extent
from .loop import Trainer, TrainingError
from .synth import OracleSyncEmbedder, SynthOracle, synth_dataset

__all__ = [
    "Adam",
    "OptimizerError",
    "exp_schedule",
    "DensifyConfig",
    "TrainConfig",
    "densify_and_prune",
    "scene_extent",
    "Trainer",
    "TrainingError",
    "OracleSyncEmbedder",
    "SynthOracle",
    "synth_dataset",
]
