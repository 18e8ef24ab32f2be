"""Salient object detection on colored point clouds, built on a small numpy autodiff."""
from .data import PointView, generate_scene, load_dataset, load_ply, save_ply
from .metrics import MetricsReport, aggregate, evaluate
from .model import ModelConfig, SaliencyNet, plan_geometry
from .training import TrainConfig, infer_full_view, train

__version__ = "0.1.0"

__all__ = [
    "MetricsReport", "ModelConfig", "PointView", "SaliencyNet", "TrainConfig", "aggregate",
    "evaluate", "generate_scene", "infer_full_view", "load_dataset", "load_ply", "plan_geometry",
    "save_ply", "train",
]
