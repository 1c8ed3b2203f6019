"""Adam-based training loop, key=value config files and binary checkpoints."""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import rng
from .autodiff import ContractError
from .model import DvipConfig, DvipModel, NumericalError, objective_and_grad

log = logging.getLogger(__name__)


class NonFiniteGradient(ArithmeticError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class TrainingError(ArithmeticError):
    def __init__(self, iteration: int, component: str):
        super().__init__(f"iteration {iteration}: non-finite {component}")
        self.iteration = iteration
        self.component = component


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam step that *ascends* the objective, in place.

    All gradients are checked before anything is touched, so a non-finite
    gradient leaves parameters and moments unchanged.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] = np.asarray(params[name] + state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))


@dataclass
class TrainConfig:
    iterations: int = 150_000
    batch_size: int = 100
    num_samples: int = 20
    learning_rate: float = 1e-3
    seed: int = 0
    r_train: int = 1
    r_test: int = 100
    num_layers: int = 2
    inner_width: int = 0  # 0 -> min(D, 30)
    prior: str = "bnn"
    bnn_hidden: str = "10,10"
    constrained_prior: bool = True
    cosine_width: int = 2000
    input_propagation: bool = True
    likelihood: str = "gaussian"
    objective: str = "elbo"
    alpha: float = 0.5
    lik_var_init: float = 0.1
    noise_var_init: float = 1e-2
    q_scale_init: float = 1e-2
    quad_order: int = 20
    resample_prior: bool = False
    prior_logvar_init: float = 0.0

    def __post_init__(self):
        for name in ("batch_size", "num_samples", "r_train", "r_test", "num_layers", "cosine_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.r_train != 1:
            raise ConfigError("r_train: the training objective uses one forward sample per point")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("lik_var_init", "noise_var_init", "q_scale_init"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.objective not in ("elbo", "alpha_energy"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.objective == "alpha_energy" and not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.prior not in ("bnn", "cosine"):
            raise ConfigError(f"unknown prior {self.prior!r}")
        if self.likelihood not in ("gaussian", "probit"):
            raise ConfigError(f"unknown likelihood {self.likelihood!r}")

    def model_config(self, input_dim: int, num_data: int) -> DvipConfig:
        return DvipConfig(
            input_dim=input_dim,
            num_layers=self.num_layers,
            inner_width=self.inner_width or None,
            num_samples=self.num_samples,
            prior=self.prior,
            bnn_hidden=tuple(int(h) for h in self.bnn_hidden.split(",") if h.strip()),
            constrained_prior=self.constrained_prior,
            cosine_width=self.cosine_width,
            likelihood=self.likelihood,
            input_propagation=self.input_propagation,
            num_data=num_data,
            lik_var_init=self.lik_var_init,
            noise_var_init=self.noise_var_init,
            q_scale_init=self.q_scale_init,
            quad_order=self.quad_order,
            init_seed=self.seed,
            resample_prior=self.resample_prior,
            prior_logvar_init=self.prior_logvar_init,
        )


class ConfigError(ValueError):
    pass


def _parse_value(kind, text: str):
    if kind in (bool, "bool"):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(text)
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text.strip()


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment, unknown keys are errors."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            updates[key] = _parse_value(fields[key], value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
    return dataclasses.replace(base or TrainConfig(), **updates)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def batch_indices(num_data: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Rows of the minibatch used at ``iteration``: shuffled epochs, remainder dropped.

    A pure function of its arguments, so resuming needs no generator state.
    """
    b = min(batch_size, num_data)
    per_epoch = num_data // b
    epoch, j = divmod(iteration, per_epoch)
    perm = rng.generator(rng.DATA, seed, epoch).permutation(num_data)
    return perm[j * b:(j + 1) * b]


@dataclass
class TrainResult:
    model: DvipModel
    state: AdamState
    history: list[float]
    iteration: int
    seconds: float = 0.0


def train(model: DvipModel, X, y, config: TrainConfig, *, state: AdamState | None = None,
          start: int = 0, stop: int | None = None,
          callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run iterations ``start .. stop-1`` (default: to ``config.iterations``), in place."""

    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    stop = config.iterations if stop is None else stop
    state = state or AdamState(lr=config.learning_rate)
    history: list[float] = []
    t0 = time.perf_counter()
    for it in range(start, stop):
        idx = batch_indices(len(y), config.batch_size, config.seed, it)
        try:
            value, grads = objective_and_grad(model, X[idx], y[idx], config.seed, iteration=it,
                                              point_ids=idx, objective=config.objective, alpha=config.alpha)
        except NumericalError as e:
            raise TrainingError(it, e.component) from e
        try:
            adam_step(model.params, grads, state)
        except NonFiniteGradient as e:
            raise TrainingError(it, f"gradient of {e.name}") from e
        history.append(value)
        if callback is not None:
            callback(it, value)
    return TrainResult(model, state, history, stop, time.perf_counter() - t0)


# -- checkpoint format -------------------------------------------------------
#
#   b"DVIP" | u32 version | u32 len + utf8 JSON descriptor
#   | u32 count + parameter blocks | u64 adam t | u32 count + m blocks | u32 count + v blocks
#   | u64 seed | u64 next iteration
#   block: u32 len + utf8 name | u32 ndim | u64 dims... | float64 little-endian data

MAGIC = b"DVIP"
VERSION = 1


class CheckpointError(Exception):
    code = 1


class CheckpointFormatError(CheckpointError):
    code = 2


class CheckpointVersionError(CheckpointError):
    code = 3


class CheckpointTruncatedError(CheckpointError):
    code = 4


class CheckpointMismatchError(CheckpointError):
    code = 5


@dataclass
class Checkpoint:
    model: DvipModel
    state: AdamState
    seed: int
    iteration: int
    extra: dict = field(default_factory=dict)


def _write_blocks(buf, blocks: dict[str, np.ndarray]):
    buf.write(struct.pack("<I", len(blocks)))
    for name in sorted(blocks):
        a = np.asarray(blocks[name], dtype="<f8")  # ascontiguousarray would make 0-d arrays 1-d
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes(order="C"))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"unexpected end of file at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def blocks(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            name = self.text()
            (ndim,) = self.unpack("<I")
            shape = self.unpack(f"<{ndim}Q") if ndim else ()
            n = math.prod(shape)
            out[name] = np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        return out


def checkpoint_bytes(model: DvipModel, state: AdamState, seed: int, iteration: int,
                     extra: dict | None = None) -> bytes:
    descriptor = {
        "model": model.config.to_dict(),
        "adam": {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(text)) + text)
    _write_blocks(buf, model.params)
    buf.write(struct.pack("<Q", state.t))
    _write_blocks(buf, state.m)
    _write_blocks(buf, state.v)
    buf.write(struct.pack("<QQ", seed, iteration))
    return buf.getvalue()


def save_checkpoint(path, model: DvipModel, state: AdamState, seed: int, iteration: int,
                    extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, state, seed, iteration, extra))


def parse_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointFormatError("not a DVIP checkpoint (bad magic bytes)")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    try:
        descriptor = json.loads(r.text())
        cfg = descriptor["model"]
        cfg["bnn_hidden"] = tuple(cfg["bnn_hidden"])
        config = DvipConfig(**cfg)
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"bad architecture descriptor: {e}") from None
    params = r.blocks()
    (t,) = r.unpack("<Q")
    m = r.blocks()
    v = r.blocks()
    seed, iteration = r.unpack("<QQ")
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} trailing bytes")
    expected = DvipModel(config).params
    for name, arr in expected.items():
        if name not in params:
            raise CheckpointMismatchError(f"missing parameter {name}")
        if params[name].shape != arr.shape:
            raise CheckpointMismatchError(f"{name}: shape {params[name].shape} != {arr.shape}")
    unknown = set(params) - set(expected)
    if unknown:
        raise CheckpointMismatchError(f"unexpected parameters {sorted(unknown)}")
    for name in list(m) + list(v):
        if name not in params or (name in m and m[name].shape != params[name].shape) or (
                name in v and v[name].shape != params[name].shape):
            raise CheckpointMismatchError(f"optimizer block {name} does not match a parameter")
    model = DvipModel(config, {k: params[k] for k in expected})
    state = AdamState(t=t, m=m, v=v, **descriptor["adam"])
    return Checkpoint(model, state, seed, iteration, descriptor.get("extra", {}))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
