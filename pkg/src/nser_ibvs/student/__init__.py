"""Numpy student network: layers, model, data pipeline and training."""

from .data import REAL, SIM, Dataset, NormalizationBounds, denormalize, distill, normalize, render_input
from .net import StudentNet, default_arch, full_size_arch
from .train import TrainConfig, TrainHistory, train

__all__ = [
    "REAL", "SIM", "Dataset", "NormalizationBounds", "denormalize", "distill", "normalize",
    "render_input", "StudentNet", "default_arch", "full_size_arch", "TrainConfig", "TrainHistory", "train",
]
