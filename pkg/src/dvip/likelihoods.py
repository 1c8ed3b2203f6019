"""Observation models and their expectations under a Gaussian latent."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError

LOG_2PI = float(np.log(2 * np.pi))


@dataclass
class GaussianLikelihood:
    log_var: float = float(np.log(0.1))

    @property
    def variance(self) -> float:
        return float(np.exp(self.log_var))


@dataclass
class ProbitLikelihood:
    order: int = 20

    def __post_init__(self):
        if self.order < 2:
            raise ContractError("quadrature order must be >= 2")


@ad.differentiable
def gaussian_log_density(y, f_mean, f_var, noise_var):
    """E_{f ~ N(f_mean, f_var)} log N(y | f, noise_var), elementwise."""
    tape = ad.tape_of(y, f_mean, f_var, noise_var)
    y, mu, v, s2 = (tape.lift(a) for a in (y, f_mean, f_var, noise_var))
    return (ad.log(s2) + LOG_2PI) * -0.5 - (ad.square(y - mu) + v) / (s2 * 2.0)


@lru_cache(maxsize=None)
def _hermgauss(order: int):
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    # exact mirror symmetry, so flipping a label only reorders the terms
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    nodes.flags.writeable = False
    weights.flags.writeable = False
    return nodes, weights


def gauss_hermite(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Physicists' Gauss-Hermite rule: integrates p(x) exp(-x^2) for deg p < 2*order."""
    if not 2 <= order <= 100:
        raise ContractError(f"quadrature order {order} outside [2, 100]")
    return _hermgauss(int(order))


@ad.differentiable
def probit_expected_loglik(f_mean, f_var, y, order: int = 20):
    """E_{f ~ N(f_mean, f_var)} log Phi(y f) for labels y in {-1, +1}, by quadrature."""
    nodes, weights = gauss_hermite(order)
    tape = ad.tape_of(f_mean, f_var)
    mu, v = tape.lift(f_mean), tape.lift(f_var)
    y = np.asarray(y, dtype=float)
    shape = np.broadcast_shapes(mu.shape, v.shape, y.shape)
    mu_e = mu.reshape(*mu.shape, 1)
    # the tiny floor keeps the sqrt adjoint finite at zero variance
    sd_e = ad.sqrt(v * 2.0 + 1e-300).reshape(*v.shape, 1)
    f = mu_e + sd_e * nodes
    logp = ad.log_ndtr(f * y[..., None])
    # summing mirrored node pairs makes E[log Phi(-f)] at m equal E[log Phi(f)] at -m bit for bit
    pairs = logp + logp[..., ::-1]
    out = (pairs * (weights / (2.0 * np.sqrt(np.pi)))).sum(axis=-1)
    return out if out.shape == shape else out.broadcast_to(shape)
