"""Stacked hourglass pose estimation with one-hot activity fusion, in numpy."""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .data import PersonAnnotation, PoseDataset, load_annotations, make_activity_tensor, make_heatmaps
from .evaluation import EvalReport, compare_reports, decode_heatmaps, evaluate, pckh
from .model import ModelConfig, StackedHourglass, build_model
from .tensor import Parameter, Tensor, backward, no_grad
from .training import TrainConfig, TrainState, total_loss, train

__all__ = [
    "EvalReport", "ModelConfig", "Parameter", "PersonAnnotation", "PoseDataset", "StackedHourglass",
    "Tensor", "TrainConfig", "TrainState", "backward", "build_model", "compare_reports",
    "decode_heatmaps", "evaluate", "load_annotations", "load_checkpoint", "make_activity_tensor",
    "make_heatmaps", "no_grad", "pckh", "save_checkpoint", "total_loss", "train",
]
