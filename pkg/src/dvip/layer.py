"""One layer of linear-coefficient Gaussian units over prior-sample features.

All H units of a layer share the same S prior functions, hence the same
feature map; each unit has its own Gaussian over the S linear coefficients
and its own latent noise variance. Functions here are vectorized over units:
coefficient means are (H, S), Cholesky factors (H, S, S).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .priors import PriorSampleSet


@dataclass
class EmpiricalMoments:
    mean: Any  # (B,)
    features: Any  # (B, S)


@dataclass
class VariationalCoefficients:
    """Gaussian over linear coefficients.

    ``chol_raw`` holds the Cholesky factor with its diagonal stored as logs;
    entries above the diagonal are ignored.
    """

    mean: Any  # (H, S) or (S,)
    chol_raw: Any  # (H, S, S) or (S, S)

    @classmethod
    def initial(cls, num_units: int, num_samples: int, scale: float = 1e-2) -> "VariationalCoefficients":
        raw = np.zeros((num_units, num_samples, num_samples))
        idx = np.arange(num_samples)
        raw[:, idx, idx] = np.log(scale)
        return cls(np.zeros((num_units, num_samples)), raw)

    @classmethod
    def from_cholesky(cls, mean, chol) -> "VariationalCoefficients":
        chol = np.array(chol, dtype=float)
        idx = np.arange(chol.shape[-1])
        raw = np.tril(chol, -1)
        raw[..., idx, idx] = np.log(chol[..., idx, idx])
        return cls(np.array(mean, dtype=float), raw)

    @property
    def chol(self) -> np.ndarray:
        return np.asarray(cholesky_factor(self.chol_raw))

    @property
    def cov(self) -> np.ndarray:
        c = self.chol
        return c @ np.swapaxes(c, -1, -2)


@ad.differentiable
def cholesky_factor(raw):
    tape = ad.tape_of(raw)
    raw = tape.lift(raw)
    eye = np.eye(raw.shape[-1])
    return ad.tril(raw, -1) + ad.exp(raw) * eye


@ad.differentiable
def empirical_moments(samples: PriorSampleSet | Any) -> EmpiricalMoments:
    """Sample mean over the S functions and the centered, 1/sqrt(S)-scaled features."""
    values = samples.values if isinstance(samples, PriorSampleSet) else samples
    tape = ad.tape_of(values)
    values = tape.lift(values)
    if values.ndim != 2 or values.shape[0] < 1:
        raise ContractError(f"expected (S, B) prior values, got shape {values.shape}")
    s = values.shape[0]
    mean = values.mean(axis=0)
    features = (values - mean).T * (1.0 / np.sqrt(s))
    return EmpiricalMoments(mean, features)


@ad.differentiable
def conditional(moments: EmpiricalMoments, q: VariationalCoefficients, noise_var=None,
                prev_input=None):
    """Gaussian marginal of each unit's output after integrating out its coefficients.

    Returns ``(means, variances)`` of shape (B, H), or (B,) when ``q`` describes
    a single unit with a 1-D mean. ``noise_var`` is one latent variance per unit
    (None for none). ``prev_input`` (B, H) is added to the means only.
    """
    tape = ad.tape_of(moments.mean, moments.features, q.mean, q.chol_raw, noise_var, prev_input)
    phi = tape.lift(moments.features)
    m_star = tape.lift(moments.mean)
    m = tape.lift(q.mean)
    single = m.ndim == 1
    if single:
        m = m.reshape(1, m.shape[0])
    raw = tape.lift(q.chol_raw)
    if raw.ndim == 2:
        raw = raw.reshape(1, *raw.shape)
    if phi.shape[1] != m.shape[1] or raw.shape[-1] != m.shape[1]:
        raise ContractError(f"feature width {phi.shape[1]} does not match coefficients {m.shape}")
    chol = cholesky_factor(raw)
    means = phi @ m.T + m_star.reshape(m_star.shape[0], 1)
    # phi^T S phi = ||L^T phi||^2, so variances cannot go negative
    proj = phi @ chol  # (H, B, S)
    variances = ad.square(proj).sum(axis=-1).T
    if noise_var is not None:
        variances = variances + tape.lift(noise_var)
    if prev_input is not None:
        prev = tape.lift(prev_input)
        if single and prev.ndim == 1:
            prev = prev.reshape(prev.shape[0], 1)
        means = means + prev
    if single:
        b = means.shape[0]
        return means.reshape(b), variances.reshape(b)
    return means, variances


@ad.differentiable
def sample_output(means, variances, noise_draws):
    """Reparameterized draw ``mean + sqrt(variance) * eps``."""
    tape = ad.tape_of(means, variances)
    eps = np.asarray(noise_draws, dtype=float)
    v = tape.lift(variances)
    if np.any(v.value < 0):
        raise ContractError("negative variance")
    if not isinstance(variances, ad.Var) and np.all(v.value == 0):
        return tape.lift(means) + 0.0 * eps
    return tape.lift(means) + ad.sqrt(v) * eps


@ad.differentiable
def kl_to_prior(q: VariationalCoefficients):
    """KL(N(m, LL^T) || N(0, I)) in nats, summed over units."""
    tape = ad.tape_of(q.mean, q.chol_raw)
    m = tape.lift(q.mean)
    raw = tape.lift(q.chol_raw)
    s = m.shape[-1]
    n_units = 1 if m.ndim == 1 else m.shape[0]
    chol = cholesky_factor(raw)
    trace = ad.square(chol).sum()
    idx = np.arange(s)
    # log det(LL^T) = 2 * sum of the stored log-diagonal
    logdet = raw[..., idx, idx].sum() * 2.0
    return (trace + ad.square(m).sum() - logdet - float(s * n_units)) * 0.5
