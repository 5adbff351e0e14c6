"""Novel class discovery on synthetic data with relation-weighted distillation."""

from .config import OptimizerConfig, RunConfig, apply_overrides, load_config
from .data import Dataset, SyntheticSpec, generate, load, save
from .losses import NovelProbSource, WeightMode, total_loss
from .metrics import EvalReport, cluster_acc, task_agnostic_eval
from .model import load_checkpoint, save_checkpoint
from .trainer import TrainLog, discover, pretrain
from .transport import SinkhornConfig, solve

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EvalReport",
    "NovelProbSource",
    "OptimizerConfig",
    "RunConfig",
    "SinkhornConfig",
    "SyntheticSpec",
    "TrainLog",
    "WeightMode",
    "apply_overrides",
    "cluster_acc",
    "discover",
    "generate",
    "load",
    "load_checkpoint",
    "load_config",
    "pretrain",
    "save",
    "save_checkpoint",
    "solve",
    "task_agnostic_eval",
    "total_loss",
    "__version__",
]
