"""Fusion CNNs with ensemble Monte Carlo dropout uncertainty, on a from-scratch numpy autodiff core."""

from fusenet_uq.kernels import BACKEND
from fusenet_uq.models import ModelSpec, build_model, predict_proba
from fusenet_uq.train import TrainConfig, evaluate, fit
from fusenet_uq.uncertainty import EnsembleConfig, PredictiveSummary, emcd_predict

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "EnsembleConfig",
    "ModelSpec",
    "PredictiveSummary",
    "TrainConfig",
    "build_model",
    "emcd_predict",
    "evaluate",
    "fit",
    "predict_proba",
]
