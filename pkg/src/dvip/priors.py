"""Implicit-process priors: samplers of whole functions g(x, z).

Two families are provided. The Bayesian neural network prior draws every
weight as ``mean + exp(log_var / 2) * z`` so gradients reach the prior
parameters through the noise ``z`` (reparameterization). By default the
means and log-variances are shared by all weights (and, separately, all
biases) of a network layer, which leaves four scalars per network layer.

The cosine prior is a single hidden layer of ``width`` cosine units with
frozen random frequencies and phases; with standard-normal output weights
its covariance approaches the RBF kernel as the width grows.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import ContractError

Key = int | Sequence[int]


def _key(seed: Key) -> tuple[int, ...]:
    return (int(seed),) if np.isscalar(seed) else tuple(int(s) for s in seed)


@dataclass
class PriorSampleSet:
    """S prior functions evaluated on a batch: ``values[s, n] = f_s(x_n)``."""

    values: Any  # (S, B) array or Var
    noise: list[np.ndarray]
    seed: tuple[int, ...]

    @property
    def num_samples(self) -> int:
        return self.values.shape[0]


@dataclass
class BnnPriorParams:
    widths: tuple[int, ...]
    values: dict[str, Any]
    constrained: bool = True

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    @classmethod
    def initial(cls, widths: Sequence[int], constrained: bool = True) -> "BnnPriorParams":
        widths = tuple(int(w) for w in widths)
        k = len(widths) - 1
        if k < 1 or min(widths) < 1 or widths[-1] != 1:
            raise ContractError(f"invalid architecture {widths}")
        if constrained:
            values = {name: np.zeros(k) for name in ("w_mean", "w_logvar", "b_mean", "b_logvar")}
        else:
            values = {}
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                values[f"w_mean{i}"] = np.zeros((a, b))
                values[f"w_logvar{i}"] = np.zeros((a, b))
                values[f"b_mean{i}"] = np.zeros(b)
                values[f"b_logvar{i}"] = np.zeros(b)
        return cls(widths, values, constrained)

    def with_values(self, values: dict[str, Any]) -> "BnnPriorParams":
        return replace(self, values=dict(values))


@dataclass
class CosineGpPriorParams:
    width: int
    values: dict[str, Any]  # log_lengthscales (D,), log_amplitude ()
    frequencies: np.ndarray = field(repr=False)  # (D, W), frozen
    phases: np.ndarray = field(repr=False)  # (W,), frozen

    @classmethod
    def initial(cls, input_dim: int, width: int = 2000, seed: Key = 0,
                lengthscale: float = 1.0, amplitude: float = 1.0) -> "CosineGpPriorParams":
        if width < 1:
            raise ContractError("cosine prior width must be >= 1")
        g = rng.generator(rng.INIT, *_key(seed))
        frequencies = g.standard_normal((input_dim, width))
        phases = g.uniform(0.0, 2 * np.pi, width)
        values = {
            "log_lengthscales": np.full(input_dim, np.log(lengthscale)),
            "log_amplitude": np.array(np.log(amplitude)),
        }
        return cls(int(width), values, frequencies, phases)

    def with_values(self, values: dict[str, Any]) -> "CosineGpPriorParams":
        return replace(self, values=dict(values))


def bnn_noise(params: BnnPriorParams, num_samples: int, seed: Key) -> list[np.ndarray]:
    """Standard-normal draws for every weight and bias of S networks."""
    g = rng.generator(rng.PRIOR, *_key(seed))
    noise = []
    for a, b in zip(params.widths[:-1], params.widths[1:]):
        noise.append(g.standard_normal((num_samples, a, b)))
        noise.append(g.standard_normal((num_samples, 1, b)))
    return noise


@ad.differentiable
def sample_bnn(params: BnnPriorParams, inputs, num_samples: int, seed: Key,
               noise: list[np.ndarray] | None = None) -> PriorSampleSet:
    """Evaluate S networks with reparameterized weights on ``inputs`` (B x D)."""
    if num_samples < 1:
        raise ContractError("num_samples must be >= 1")
    if inputs.ndim != 2 or inputs.shape[0] < 1 or inputs.shape[1] != params.widths[0]:
        raise ContractError(f"inputs of shape {inputs.shape} do not fit architecture {params.widths}")
    if noise is None:
        noise = bnn_noise(params, num_samples, seed)
    tape = ad.tape_of(inputs, *params.values.values())
    v = {k: tape.lift(x) for k, x in params.values.items()}
    h = tape.lift(inputs)
    last = params.num_layers - 1
    for i in range(params.num_layers):
        zw, zb = noise[2 * i], noise[2 * i + 1]
        if params.constrained:
            w = v["w_mean"][i] + ad.exp(v["w_logvar"][i] * 0.5) * zw
            b = v["b_mean"][i] + ad.exp(v["b_logvar"][i] * 0.5) * zb
        else:
            w = v[f"w_mean{i}"] + ad.exp(v[f"w_logvar{i}"] * 0.5) * zw
            b = v[f"b_mean{i}"] + ad.exp(v[f"b_logvar{i}"] * 0.5) * zb
        h = h @ w + b
        if i < last:
            h = ad.tanh(h)
    values = h.reshape(num_samples, inputs.shape[0])
    return PriorSampleSet(values, noise, _key(seed))


def cosine_noise(params: CosineGpPriorParams, num_samples: int, seed: Key) -> list[np.ndarray]:
    g = rng.generator(rng.PRIOR, *_key(seed))
    return [g.standard_normal((num_samples, params.width))]


@ad.differentiable
def sample_cosine_gp(params: CosineGpPriorParams, inputs, num_samples: int, seed: Key,
                     noise: list[np.ndarray] | None = None) -> PriorSampleSet:
    """f_s(x) = amp * sqrt(2/W) * sum_k a_sk cos(w_k . (x / lengthscale) + b_k)."""
    if num_samples < 1:
        raise ContractError("num_samples must be >= 1")
    if inputs.ndim != 2 or inputs.shape[1] != params.frequencies.shape[0]:
        raise ContractError(f"inputs of shape {inputs.shape} do not match "
                            f"{params.frequencies.shape[0]} input dims")
    if noise is None:
        noise = cosine_noise(params, num_samples, seed)
    tape = ad.tape_of(inputs, *params.values.values())
    x = tape.lift(inputs) / ad.exp(tape.lift(params.values["log_lengthscales"]))
    features = ad.cos(x @ params.frequencies + params.phases)  # (B, W)
    amp = ad.exp(tape.lift(params.values["log_amplitude"])) * np.sqrt(2.0 / params.width)
    values = (tape.lift(noise[0]) @ features.T) * amp
    return PriorSampleSet(values, noise, _key(seed))


def sample_prior(params, inputs, num_samples: int, seed: Key, noise=None) -> PriorSampleSet:
    if isinstance(params, BnnPriorParams):
        return sample_bnn(params, inputs, num_samples, seed, noise)
    return sample_cosine_gp(params, inputs, num_samples, seed, noise)


def prior_noise(params, num_samples: int, seed: Key) -> list[np.ndarray]:
    if isinstance(params, BnnPriorParams):
        return bnn_noise(params, num_samples, seed)
    return cosine_noise(params, num_samples, seed)
