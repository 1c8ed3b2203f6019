"""Datasets, standardization, train/test splits and evaluation metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special, stats

from . import rng
from .model import PredictiveMixture, predictive_log_density


class DataError(ValueError):
    pass


class EmptyDatasetError(DataError):
    pass


class RaggedRowError(DataError):
    pass


class NonNumericCellError(DataError):
    def __init__(self, row: int, col: int, cell: str):
        super().__init__(f"row {row}, column {col}: non-numeric value {cell!r}")
        self.row = row
        self.col = col


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    task: str = "regression"  # "regression" | "binary"
    columns: list[str] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise DataError(f"feature matrix {self.X.shape} does not match {self.y.shape[0]} targets")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise DataError("missing or non-finite values")
        if self.task == "binary" and not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise DataError("binary labels must be -1 or +1")

    @property
    def num_points(self) -> int:
        return self.X.shape[0]

    @property
    def num_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.task, list(self.columns), self.name)


def _binary_labels(y: np.ndarray) -> np.ndarray:
    values = set(np.unique(y).tolist())
    if values <= {0.0, 1.0}:
        return 2.0 * y - 1.0
    if values <= {-1.0, 1.0}:
        return y
    raise DataError(f"binary targets must be 0/1 or -1/+1, found {sorted(values)[:5]}")


def load_csv(path, task: str = "regression", name: str | None = None) -> Dataset:
    """Header row, comma separated, last column is the target.

    Binary targets given as 0/1 are mapped to -1/+1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if len(rows) < 2:
        raise EmptyDatasetError(f"{path}: no data rows")
    header, body = rows[0], rows[1:]
    if len(header) < 2:
        raise DataError(f"{path}: need at least one feature and a target column")
    values = np.empty((len(body), len(header)))
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise RaggedRowError(f"{path}: row {i} has {len(row)} fields, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                values[i - 2, j] = float(cell)
            except ValueError:
                raise NonNumericCellError(i, j + 1, cell) from None
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: missing or non-finite values")
    y = values[:, -1]
    if task == "binary":
        y = _binary_labels(y)
    return Dataset(values[:, :-1], y, task, [h.strip() for h in header], name or path.stem)


def save_csv(path, data: Dataset) -> None:
    cols = data.columns or [f"x{i}" for i in range(data.num_features)] + ["y"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for xi, yi in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


@dataclass
class Standardizer:
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0

    @classmethod
    def fit(cls, data: Dataset) -> "Standardizer":
        x_scale = data.X.std(axis=0)
        x_scale[x_scale == 0] = 1.0
        if data.task == "regression":
            y_scale = float(data.y.std()) or 1.0
            return cls(data.X.mean(axis=0), x_scale, float(data.y.mean()), y_scale)
        return cls(data.X.mean(axis=0), x_scale)

    def transform_x(self, X):
        return (np.asarray(X) - self.x_mean) / self.x_scale

    def inverse_x(self, Z):
        return np.asarray(Z) * self.x_scale + self.x_mean

    def transform_y(self, y):
        return (np.asarray(y) - self.y_mean) / self.y_scale

    def inverse_y(self, z):
        return np.asarray(z) * self.y_scale + self.y_mean

    def transform(self, data: Dataset) -> Dataset:
        y = self.transform_y(data.y) if data.task == "regression" else data.y
        return Dataset(self.transform_x(data.X), y, data.task, list(data.columns), data.name)

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_scale": self.x_scale.tolist(),
                "y_mean": self.y_mean, "y_scale": self.y_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["x_mean"], dtype=float), np.array(d["x_scale"], dtype=float),
                   float(d["y_mean"]), float(d["y_scale"]))


@dataclass(frozen=True)
class SplitSpec:
    index: int = 0
    test_fraction: float = 0.1
    seed_base: int = 0


def split_indices(num_points: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    if num_points < 10:
        raise DataError("need at least 10 points to split")
    perm = rng.generator(rng.DATA, spec.seed_base, 1_000_003, spec.index).permutation(num_points)
    n_test = int(round(spec.test_fraction * num_points))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def make_split(data: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    train_idx, test_idx = split_indices(data.num_points, spec)
    return data.subset(train_idx), data.subset(test_idx)


# -- synthetic datasets ------------------------------------------------------

def toy_sine(num_points: int = 200, noise: float = 0.1, seed: int = 0) -> Dataset:
    """y = sin(2x) + noise with x uniform on [-2, 2]."""
    g = np.random.default_rng(seed)
    x = g.uniform(-2.0, 2.0, (num_points, 1))
    y = np.sin(2.0 * x[:, 0]) + noise * g.standard_normal(num_points)
    return Dataset(x, y, "regression", ["x", "y"], "toy_sine")


# -- metrics -----------------------------------------------------------------

def _same_length(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DataError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(pred_means, targets) -> float:
    p, t = _same_length(pred_means, targets)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def test_nll(mixture: PredictiveMixture, targets, noise_var: float, y_scale: float = 1.0) -> float:
    """Mean negative log predictive density in original units.

    ``mixture`` and ``targets`` are on the standardized scale; the change of
    variables adds ``log(y_scale)``.
    """
    targets = np.asarray(targets, dtype=float)
    if targets.shape[0] != mixture.means.shape[0]:
        raise DataError(f"length mismatch: {mixture.means.shape[0]} vs {targets.shape[0]}")
    return float(-np.mean(predictive_log_density(mixture, targets, noise_var)) + np.log(y_scale))


test_nll.__test__ = False  # not a pytest test


def _crps_kernel(d, v):
    """E|X| for X ~ N(d, v); reduces to |d| at v = 0."""
    d, v = np.broadcast_arrays(np.asarray(d, dtype=float), np.asarray(v, dtype=float))
    sd = np.sqrt(v)
    pos = sd > 0
    z = np.divide(d, sd, out=np.zeros_like(d), where=pos)
    out = sd * (z * (2.0 * special.ndtr(z) - 1.0) + 2.0 * stats.norm.pdf(z))
    return np.where(pos, out, np.abs(d))


def crps_mixture(mixture: PredictiveMixture, targets, noise_var: float = 0.0,
                 y_scale: float = 1.0) -> np.ndarray:
    """Closed-form CRPS of the predictive mixture of y at each target, original units.

    CRPS = E|Y - y| - E|Y - Y'| / 2 with Y, Y' independent draws from the
    mixture, each term a sum of folded-normal means over component pairs.
    """
    y = np.asarray(targets, dtype=float)
    m, v = mixture.means, mixture.variances + noise_var
    w = mixture.weights
    first = (w * _crps_kernel(y[:, None] - m, v)).sum(axis=1)
    dm = m[:, :, None] - m[:, None, :]
    dv = v[:, :, None] + v[:, None, :]
    pair = _crps_kernel(dm, dv)
    second = 0.5 * np.einsum("r,brs,s->b", w, pair, w)
    return (first - second) * y_scale


def binary_metrics(prob_positive, labels) -> tuple[float, float]:
    """Accuracy (percent, ties go to +1) and mean log-likelihood of labels in {-1, +1}."""
    p, y = _same_length(prob_positive, labels)
    pred = np.where(p >= 0.5, 1.0, -1.0)
    acc = 100.0 * float(np.mean(pred == y))
    with np.errstate(divide="ignore"):
        ll = np.where(y > 0, np.log(p), np.log1p(-p))
    return acc, float(np.mean(ll))


def standard_error(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return 0.0
    return float(v.std(ddof=1) / np.sqrt(v.size))
