"""Deep stack of implicit-process layers: sampling, objectives and prediction.

Parameters live in a flat ``dict[str, np.ndarray]`` on :class:`DvipModel`.
Objective evaluation records a fresh tape per call. The prior noise of layer
``l`` is keyed by the model (see :meth:`DvipModel.prior_key`) and the
Gaussian draw of point ``i`` by ``(seed, iteration, l, pass, i, unit)``, so
outputs of a point never depend on which other points share its batch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy import special

from . import autodiff as ad
from . import rng
from .autodiff import ContractError
from .layer import VariationalCoefficients, conditional, empirical_moments, kl_to_prior, sample_output
from .likelihoods import LOG_2PI, gaussian_log_density, probit_expected_loglik
from .priors import BnnPriorParams, CosineGpPriorParams, sample_prior


class NumericalError(ArithmeticError):
    def __init__(self, component: str, message: str = "non-finite value"):
        super().__init__(f"{component}: {message}")
        self.component = component


@dataclass
class DvipConfig:
    input_dim: int
    num_layers: int = 2
    inner_width: int | None = None  # None -> min(input_dim, 30)
    num_samples: int = 20
    prior: str = "bnn"  # "bnn" | "cosine"
    bnn_hidden: tuple[int, ...] = (10, 10)
    constrained_prior: bool = True
    cosine_width: int = 2000
    likelihood: str = "gaussian"  # "gaussian" | "probit"
    input_propagation: bool = True
    num_data: int = 1
    lik_var_init: float = 0.1
    noise_var_init: float = 1e-2
    q_scale_init: float = 1e-2
    quad_order: int = 20
    init_seed: int = 0
    resample_prior: bool = False
    prior_logvar_init: float = 0.0

    def __post_init__(self):
        self.bnn_hidden = tuple(int(h) for h in self.bnn_hidden)
        if self.input_dim < 1 or self.num_layers < 1 or self.num_samples < 1:
            raise ContractError("input_dim, num_layers and num_samples must be positive")
        if self.prior not in ("bnn", "cosine"):
            raise ContractError(f"unknown prior {self.prior!r}")
        if self.likelihood not in ("gaussian", "probit"):
            raise ContractError(f"unknown likelihood {self.likelihood!r}")

    @property
    def widths(self) -> list[int]:
        """[D, H_1, ..., H_L] with a scalar output layer."""
        inner = self.inner_width or min(self.input_dim, 30)
        return [self.input_dim] + [inner] * (self.num_layers - 1) + [1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bnn_hidden"] = list(self.bnn_hidden)
        return d


@dataclass
class PredictiveMixture:
    """R equally weighted Gaussian components per test point (latent f, no noise)."""

    means: np.ndarray  # (B, R)
    variances: np.ndarray  # (B, R)

    @property
    def num_components(self) -> int:
        return self.means.shape[1]

    @property
    def weights(self) -> np.ndarray:
        r = self.num_components
        return np.full(r, 1.0 / r)

    def mean(self) -> np.ndarray:
        return self.means.mean(axis=1)

    def density(self, y, noise_var: float = 0.0) -> np.ndarray:
        """Mixture density of y = f + noise at each point; ``y`` broadcasts against (B,)."""
        y = np.asarray(y, dtype=float)
        v = self.variances + noise_var
        d = np.exp(-0.5 * (y[..., None] - self.means) ** 2 / v) / np.sqrt(2 * np.pi * v)
        return d.mean(axis=-1)


@dataclass
class ForwardSample:
    layer_samples: list[np.ndarray]  # inner layers, each (R, B, H_l)
    means: np.ndarray  # (R, B)
    variances: np.ndarray  # (R, B)


@dataclass(eq=False)
class DvipModel:
    config: DvipConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self._frozen: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        if not self.params:
            self.params = self.initial_params()

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    def initial_params(self) -> dict[str, np.ndarray]:
        c = self.config
        w = c.widths
        params: dict[str, np.ndarray] = {}
        for l in range(1, c.num_layers + 1):
            prior = self._prior_template(l)
            for k, v in prior.values.items():
                v = np.array(v, dtype=float)
                if "logvar" in k:
                    v[...] = c.prior_logvar_init
                params[f"layer{l}.prior.{k}"] = v
            q = VariationalCoefficients.initial(w[l], c.num_samples, c.q_scale_init)
            params[f"layer{l}.q_mean"] = q.mean
            params[f"layer{l}.q_chol"] = q.chol_raw
            if l < c.num_layers:
                params[f"layer{l}.log_noise"] = np.full(w[l], np.log(c.noise_var_init))
        if c.likelihood == "gaussian":
            params["likelihood.log_var"] = np.array(np.log(c.lik_var_init))
        return params

    def _prior_template(self, l: int):
        c = self.config
        d_in = c.widths[l - 1]
        if c.prior == "bnn":
            return BnnPriorParams.initial((d_in, *c.bnn_hidden, 1), c.constrained_prior)
        p = CosineGpPriorParams.initial(d_in, c.cosine_width, seed=(c.init_seed, l))
        self._frozen[l] = (p.frequencies, p.phases)
        return p

    def prior_params(self, l: int, values: Mapping[str, Any] | None = None):
        """Prior parameters of layer ``l`` drawn from ``values`` (default: own params)."""
        values = self.params if values is None else values
        prefix = f"layer{l}.prior."
        own = {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}
        c = self.config
        if c.prior == "bnn":
            return BnnPriorParams((c.widths[l - 1], *c.bnn_hidden, 1), own, c.constrained_prior)
        if l not in self._frozen:
            self._prior_template(l)
        freq, phase = self._frozen[l]
        return CosineGpPriorParams(c.cosine_width, own, freq, phase)

    def prior_key(self, l: int, seed: int = 0, iteration: int = 0) -> tuple[int, ...]:
        """Key of the prior noise z of layer ``l``.

        By default z belongs to the model, so coefficient s always weights the
        same prior function and only the prior parameters move it.
        """
        if self.config.resample_prior:
            return (seed, iteration, l)
        return (self.config.init_seed, l)

    def propagates(self, l: int) -> bool:
        w = self.config.widths
        return self.config.input_propagation and l < self.num_layers and w[l - 1] == w[l]

    def copy(self) -> "DvipModel":
        return DvipModel(self.config, {k: v.copy() for k, v in self.params.items()})


def _leaves(model: DvipModel, tape: ad.Tape) -> dict[str, ad.Var]:
    return {k: tape.leaf(v) for k, v in model.params.items()}


def _forward_graph(model: DvipModel, P: Mapping[str, ad.Var], X, *, seed: int, iteration: int,
                   point_ids, passes: int):
    tape = next(iter(P.values())).tape
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.config.input_dim:
        raise ContractError(f"inputs of shape {X.shape} do not match input_dim {model.config.input_dim}")
    b = X.shape[0]
    if b < 1:
        raise ContractError("empty batch")
    ids = np.arange(b) if point_ids is None else np.asarray(point_ids, dtype=np.int64)
    widths = model.config.widths
    s = model.config.num_samples
    f = tape.lift(np.tile(X, (passes, 1)))
    pass_idx = np.repeat(np.arange(passes), b)
    point_idx = np.tile(ids, passes)
    inner = []
    means = variances = None
    for l in range(1, model.num_layers + 1):
        samples = sample_prior(model.prior_params(l, P), f, s, seed=model.prior_key(l, seed, iteration))
        moments = empirical_moments(samples)
        q = VariationalCoefficients(P[f"layer{l}.q_mean"], P[f"layer{l}.q_chol"])
        last = l == model.num_layers
        noise = None if last else ad.exp(P[f"layer{l}.log_noise"])
        prev = f if model.propagates(l) else None
        means, variances = conditional(moments, q, noise, prev)
        if not last:
            eps = rng.keyed_normals(rng.LAYER, seed, iteration, l, pass_idx[:, None],
                                    point_idx[:, None], np.arange(widths[l])[None, :])
            f = sample_output(means, variances, eps)
            inner.append(f)
    return inner, means.reshape(passes * b), variances.reshape(passes * b)


def forward_sample(model: DvipModel, X, seed: int = 0, *, iteration: int = 0, point_ids=None,
                   passes: int = 1) -> ForwardSample:
    """Propagate ``passes`` sample paths of every point through the stack."""
    tape = ad.Tape()
    inner, m, v = _forward_graph(model, _leaves(model, tape), X, seed=seed, iteration=iteration,
                                 point_ids=point_ids, passes=passes)
    b = np.asarray(X).shape[0]
    return ForwardSample(
        [x.value.reshape(passes, b, -1) for x in inner],
        m.value.reshape(passes, b),
        v.value.reshape(passes, b),
    )


def _expected_loglik(model: DvipModel, P, y, means, variances):
    if model.config.likelihood == "gaussian":
        return gaussian_log_density(y, means, variances, ad.exp(P["likelihood.log_var"]))
    return probit_expected_loglik(means, variances, y, model.config.quad_order)


def _kl_graph(model: DvipModel, P):
    total = None
    for l in range(1, model.num_layers + 1):
        kl = kl_to_prior(VariationalCoefficients(P[f"layer{l}.q_mean"], P[f"layer{l}.q_chol"]))
        total = kl if total is None else total + kl
    return total


def _scale(model: DvipModel, batch_size: int) -> float:
    return model.config.num_data / batch_size


def _check(value: float, component: str):
    if not np.isfinite(value):
        raise NumericalError(component)


def _elbo_graph(model: DvipModel, P, X, y, *, seed, iteration, point_ids):
    _, m, v = _forward_graph(model, P, X, seed=seed, iteration=iteration, point_ids=point_ids, passes=1)
    lik = _expected_loglik(model, P, np.asarray(y, dtype=float), m, v).sum() * _scale(model, len(y))
    kl = _kl_graph(model, P)
    _check(float(lik.value), "likelihood")
    _check(float(kl.value), "kl")
    return lik - kl, lik, kl


def _alpha_graph(model: DvipModel, P, X, y, alpha: float, *, seed, iteration, point_ids):
    if model.num_layers != 1:
        raise ContractError("the alpha-energy is defined for single-layer models only")
    if not 0 < alpha <= 1:
        raise ContractError(f"alpha must lie in (0, 1], got {alpha}")
    if model.config.likelihood != "gaussian":
        raise ContractError("the alpha-energy needs a Gaussian likelihood")
    _, m, v = _forward_graph(model, P, X, seed=seed, iteration=iteration, point_ids=point_ids, passes=1)
    s2 = ad.exp(P["likelihood.log_var"])
    terms = alpha_energy_terms(np.asarray(y, dtype=float), m, v, s2, alpha)
    lik = terms.sum() * _scale(model, len(y))
    kl = _kl_graph(model, P)
    _check(float(lik.value), "likelihood")
    _check(float(kl.value), "kl")
    return lik - kl, lik, kl


@ad.differentiable
def alpha_energy_terms(y, f_mean, f_var, noise_var, alpha: float):
    """(1/alpha) log E_{f ~ N(f_mean, f_var)} N(y | f, noise_var)^alpha, elementwise."""
    tape = ad.tape_of(y, f_mean, f_var, noise_var)
    y, mu, v, s2 = (tape.lift(a) for a in (y, f_mean, f_var, noise_var))
    total = s2 + v * alpha
    return ((ad.log(s2) + LOG_2PI) * -0.5 + ad.log(s2 / total) * (0.5 / alpha)
            - ad.square(y - mu) / (total * 2.0))


def objective_and_grad(model: DvipModel, X, y, seed: int = 0, *, iteration: int = 0, point_ids=None,
                       objective: str = "elbo", alpha: float = 0.5):
    """Value of the training objective and its gradient for every parameter."""
    tape = ad.Tape()
    P = _leaves(model, tape)
    if objective == "elbo":
        obj, _, _ = _elbo_graph(model, P, X, y, seed=seed, iteration=iteration, point_ids=point_ids)
    elif objective == "alpha_energy":
        obj, _, _ = _alpha_graph(model, P, X, y, alpha, seed=seed, iteration=iteration, point_ids=point_ids)
    else:
        raise ContractError(f"unknown objective {objective!r}")
    adj = ad.backward(tape, obj, wrt=P.values())
    return float(obj.value), {k: adj[v.id] for k, v in P.items()}


def elbo(model: DvipModel, X, y, seed: int = 0, *, iteration: int = 0, point_ids=None,
         terms: bool = False):
    """Minibatch ELBO: (N/B) sum of expected log-likelihoods minus the coefficient KLs.

    With ``terms=True`` returns ``(elbo, scaled_loglik, kl)``.
    """
    tape = ad.Tape()
    obj, lik, kl = _elbo_graph(model, _leaves(model, tape), X, y, seed=seed, iteration=iteration,
                               point_ids=point_ids)
    if terms:
        return float(obj.value), float(lik.value), float(kl.value)
    return float(obj.value)


def alpha_energy(model: DvipModel, X, y, alpha: float = 0.5, seed: int = 0, *, iteration: int = 0,
                 point_ids=None, terms: bool = False):
    tape = ad.Tape()
    obj, lik, kl = _alpha_graph(model, _leaves(model, tape), X, y, alpha, seed=seed,
                                iteration=iteration, point_ids=point_ids)
    if terms:
        return float(obj.value), float(lik.value), float(kl.value)
    return float(obj.value)


def predict(model: DvipModel, X, num_components: int = 100, seed: int = 0, *,
            point_ids=None, batch_size: int = 1000) -> PredictiveMixture:
    """Gaussian mixture over the latent output from R propagated sample paths.

    Prior functions are drawn once per layer and shared by all R paths, so a
    single-layer model yields R identical components.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    ids = np.arange(n) if point_ids is None else np.asarray(point_ids)
    r = num_components
    means, variances = [], []
    # chunking is safe: the draws of a point depend only on its id
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        fs = forward_sample(model, X[sl], seed, iteration=0, point_ids=ids[sl], passes=r)
        means.append(fs.means.T)
        variances.append(fs.variances.T)
    return PredictiveMixture(np.concatenate(means), np.concatenate(variances))


def likelihood_variance(model: DvipModel) -> float:
    return float(np.exp(model.params["likelihood.log_var"]))


def predictive_log_density(mixture: PredictiveMixture, y, noise_var: float) -> np.ndarray:
    """log (1/R) sum_r N(y | m_r, v_r + noise_var), per point."""
    y = np.asarray(y, dtype=float)
    v = mixture.variances + noise_var
    comp = -0.5 * (LOG_2PI + np.log(v)) - 0.5 * (y[:, None] - mixture.means) ** 2 / v
    return special.logsumexp(comp, axis=1) - np.log(mixture.num_components)


def predict_proba(mixture: PredictiveMixture) -> np.ndarray:
    """P(y = +1) under a probit likelihood, averaged over the mixture components."""
    z = mixture.means / np.sqrt(1.0 + mixture.variances)
    return special.ndtr(z).mean(axis=1)
