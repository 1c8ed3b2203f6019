import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special, stats

from dvip import autodiff as ad
from dvip.autodiff import ContractError
from dvip.likelihoods import (
    GaussianLikelihood,
    ProbitLikelihood,
    gauss_hermite,
    gaussian_log_density,
    probit_expected_loglik,
)

from oracles import mc_mean


def test_gaussian_zero_variance_is_log_density():
    y, m, s2 = 0.7, -0.3, 0.4
    assert gaussian_log_density(y, m, 0.0, s2) == pytest.approx(stats.norm(m, np.sqrt(s2)).logpdf(y), rel=1e-14)


def test_gaussian_at_mean_unit_noise():
    assert gaussian_log_density(1.5, 1.5, 0.0, 1.0) == pytest.approx(-0.5 * np.log(2 * np.pi), rel=1e-15)
    assert gaussian_log_density(1.5, 1.5, 0.0, 1.0) == pytest.approx(-0.9189, abs=1e-4)


def test_gaussian_expectation_matches_monte_carlo():
    g = np.random.default_rng(0)
    y, m, v, s2 = 0.4, -0.2, 0.8, 0.3
    f = m + np.sqrt(v) * g.standard_normal(1_000_000)
    est, se = mc_mean(stats.norm(f, np.sqrt(s2)).logpdf(y))
    assert abs(est - gaussian_log_density(y, m, v, s2)) < 3 * se


@settings(max_examples=100, deadline=None)
@given(m=st.floats(-10, 10), v=st.floats(0, 5), s2=st.floats(1e-3, 5), dy=st.floats(1e-3, 5))
def test_gaussian_is_concave_in_y_with_peak_at_mean(m, v, s2, dy):
    at = gaussian_log_density(m, m, v, s2)
    lo, hi = gaussian_log_density(m - dy, m, v, s2), gaussian_log_density(m + dy, m, v, s2)
    assert at >= lo and at >= hi
    # midpoint concavity
    assert gaussian_log_density(m + dy / 2, m, v, s2) >= 0.5 * (at + hi) - 1e-12


def test_gaussian_likelihood_variance():
    assert GaussianLikelihood(np.log(0.3)).variance == pytest.approx(0.3)


def test_gauss_hermite_order_two():
    x, w = gauss_hermite(2)
    np.testing.assert_allclose(np.sort(x), [-1 / np.sqrt(2), 1 / np.sqrt(2)], rtol=1e-14)
    np.testing.assert_allclose(w, [np.sqrt(np.pi) / 2] * 2, rtol=1e-14)


def test_gauss_hermite_second_moment_order_three():
    x, w = gauss_hermite(3)
    assert abs(np.sum(w * x**2) - np.sqrt(np.pi) / 2) < 1e-12


@pytest.mark.parametrize("order", [2, 5, 20, 50, 100])
def test_gauss_hermite_weights_sum(order):
    _, w = gauss_hermite(order)
    assert abs(w.sum() - np.sqrt(np.pi)) < 1e-12


def test_gauss_hermite_integrates_degree_15_polynomial():
    coef = np.random.default_rng(1).normal(size=16)
    x, w = gauss_hermite(20)
    quad = np.sum(w * np.polynomial.polynomial.polyval(x, coef))
    # int x^k exp(-x^2) dx = Gamma((k+1)/2) for even k, 0 for odd k
    exact = sum(c * math.gamma((k + 1) / 2) for k, c in enumerate(coef) if k % 2 == 0)
    assert quad == pytest.approx(exact, rel=1e-12)


def test_gauss_hermite_order_bounds():
    for bad in (1, 101):
        with pytest.raises(ContractError):
            gauss_hermite(bad)
    with pytest.raises(ContractError):
        ProbitLikelihood(1)


def test_probit_at_zero():
    for y in (-1.0, 1.0):
        assert probit_expected_loglik(0.0, 0.0, y) == pytest.approx(np.log(0.5), rel=1e-14)


def test_probit_saturation():
    val = probit_expected_loglik(8.0, 0.0, 1.0)
    assert abs(val - special.log_ndtr(8.0)) < 1e-6
    assert abs(val) < 1e-6


def _probit_quad(m, v, y):
    sd = np.sqrt(v)
    fn = lambda f: special.log_ndtr(y * f) * stats.norm.pdf(f, m, sd)
    val, _ = integrate.quad(fn, m - 12 * sd, m + 12 * sd, epsabs=1e-13, epsrel=1e-13, limit=200)
    return val


def test_probit_matches_adaptive_quadrature():
    g = np.random.default_rng(2)
    for _ in range(20):
        m, v, y = g.uniform(-4, 4), g.uniform(0.01, 1.5), g.choice([-1.0, 1.0])
        assert abs(probit_expected_loglik(m, v, y) - _probit_quad(m, v, y)) < 1e-6


def test_probit_high_order_matches_adaptive_quadrature_at_large_variance():
    g = np.random.default_rng(3)
    for _ in range(20):
        m, v, y = g.uniform(-4, 4), g.uniform(1.5, 5), g.choice([-1.0, 1.0])
        assert abs(probit_expected_loglik(m, v, y, order=60) - _probit_quad(m, v, y)) < 1e-6


@settings(max_examples=100, deadline=None)
@given(m=st.floats(-20, 20), v=st.floats(0, 10))
def test_probit_label_symmetry(m, v):
    assert probit_expected_loglik(m, v, -1.0) == probit_expected_loglik(-m, v, 1.0)


@settings(max_examples=100, deadline=None)
@given(m=st.floats(-5, 5), v=st.floats(0, 1), y=st.sampled_from([-1.0, 1.0]))
def test_probit_quadrature_converged_at_order_20(m, v, y):
    a = probit_expected_loglik(m, v, y, order=20)
    b = probit_expected_loglik(m, v, y, order=50)
    assert abs(a - b) < 1e-8


def _order_gap(v_max):
    m = np.linspace(-5, 5, 101)[:, None] + np.zeros((1, 51))
    v = np.linspace(0, v_max, 51)[None, :] + np.zeros((101, 1))
    return np.abs(probit_expected_loglik(m, v, 1.0, 20) - probit_expected_loglik(m, v, 1.0, 50)).max()


def test_probit_order_20_error_at_large_variance_is_bounded():
    # log Phi is not entire, so convergence slows as the variance grows
    assert _order_gap(5.0) < 5e-5


@pytest.mark.xfail(strict=True, reason="order-20 rule reaches ~1.5e-5 at f_var=5; 1e-8 holds only for f_var <~ 1.5")
def test_probit_order_20_within_1e8_on_full_domain():
    assert _order_gap(5.0) < 1e-8


def test_probit_vectorized_and_differentiable():
    y = np.array([1.0, -1.0, 1.0])

    def fn(theta):
        return probit_expected_loglik(theta[:3], ad.exp(theta[3:]), y).sum()

    g = np.random.default_rng(3)
    assert ad.grad_check(fn, g.normal(size=6)) < 1e-6
    out = probit_expected_loglik(np.zeros(3), np.ones(3), y)
    assert out.shape == (3,)


def test_probit_deep_tail_is_finite():
    val = probit_expected_loglik(-40.0, 0.5, 1.0)
    assert np.isfinite(val) and val < -700
