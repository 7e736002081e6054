"""Physics-informed temporal-convolution twin."""

from .model import DtConfig, DtPrediction, LinearTwin, LipschitzEstimate, TcnTwin, sample_covariance
from .physics import PhysicsMap, adaptive_physics_weight, physics_residuals
from .train import composite_loss, concat_datasets, make_dataset, prediction_errors, train_dt
