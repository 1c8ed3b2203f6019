"""Deep variational implicit processes on a small numpy autodiff core."""
from .data import Dataset, SplitSpec, Standardizer, crps_mixture, load_csv, make_split, rmse
from .model import (
    DvipConfig,
    DvipModel,
    PredictiveMixture,
    alpha_energy,
    elbo,
    forward_sample,
    predict,
    predictive_log_density,
)
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DvipConfig",
    "DvipModel",
    "PredictiveMixture",
    "SplitSpec",
    "Standardizer",
    "TrainConfig",
    "alpha_energy",
    "crps_mixture",
    "elbo",
    "forward_sample",
    "load_checkpoint",
    "load_csv",
    "make_split",
    "predict",
    "predictive_log_density",
    "rmse",
    "save_checkpoint",
    "train",
]
