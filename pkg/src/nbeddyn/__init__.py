"""Learning latent embeddings of partially observed dynamical systems with bilinear neural ODEs."""

from .dynamics import TimeSeries, simulate_linear_complex, simulate_lorenz63
from .model import (
    BilinearODEModel,
    InferConfig,
    TrainConfig,
    TrainedModel,
    forecast,
    infer_initial_condition,
    load_model,
    save_model,
    train,
)

__all__ = [
    "BilinearODEModel",
    "InferConfig",
    "TimeSeries",
    "TrainConfig",
    "TrainedModel",
    "forecast",
    "infer_initial_condition",
    "load_model",
    "save_model",
    "simulate_linear_complex",
    "simulate_lorenz63",
    "train",
]
