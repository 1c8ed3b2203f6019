"""Fit-and-evaluate helpers shared by the CLI and the benchmark suites."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, Standardizer, binary_metrics, crps_mixture, rmse, test_nll
from .model import DvipModel, likelihood_variance, predict, predict_proba
from .training import AdamState, TrainConfig, TrainResult, train


@dataclass
class FittedModel:
    model: DvipModel
    standardizer: Standardizer
    state: AdamState
    config: TrainConfig
    task: str
    history: list[float]
    seconds: float


def fit(data: Dataset, config: TrainConfig) -> FittedModel:
    """Standardize on ``data`` and train a fresh model; timing covers the loop only."""
    if data.task == "binary" and config.likelihood != "probit":
        raise ValueError("binary datasets need likelihood = probit")
    std = Standardizer.fit(data)
    z = std.transform(data)
    model = DvipModel(config.model_config(data.num_features, data.num_points))
    result: TrainResult = train(model, z.X, z.y, config)
    return FittedModel(model, std, result.state, config, data.task, result.history, result.seconds)


def evaluate(model: DvipModel, std: Standardizer, data: Dataset, num_components: int = 100,
             seed: int = 0) -> dict[str, float]:
    """Metrics in original units: rmse/nll/crps for regression, accuracy/nll for binary."""
    X = std.transform_x(data.X)
    mixture = predict(model, X, num_components, seed)
    if data.task == "binary":
        acc, ll = binary_metrics(predict_proba(mixture), data.y)
        return {"accuracy": acc, "nll": -ll}
    noise = likelihood_variance(model)
    y = std.transform_y(data.y)
    return {
        "rmse": rmse(std.inverse_y(mixture.mean()), data.y),
        "nll": test_nll(mixture, y, noise, std.y_scale),
        "crps": float(np.mean(crps_mixture(mixture, y, noise, std.y_scale))),
    }


def metric_names(task: str) -> list[str]:
    return ["accuracy", "nll"] if task == "binary" else ["rmse", "nll", "crps"]
