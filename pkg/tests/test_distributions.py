import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from npoptions import autodiff as ad
from npoptions import distributions as dist
from npoptions.autodiff import Tensor

from _fd import check_grads


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# -- Gumbel-Softmax -------------------------------------------------------------

@pytest.mark.parametrize("tau", [0.1, 1.0, 5.0])
def test_gs_zero_noise_uniform_weights(tau):
    y, _ = dist.gumbel_softmax_sample(np.log(np.full(4, 0.25)), tau, np.zeros(4))
    np.testing.assert_allclose(y.data, 0.25)


def test_gs_zero_noise_is_identity_at_unit_temperature():
    y, _ = dist.gumbel_softmax_sample(np.log([0.9, 0.1]), 1.0, np.zeros(2))
    np.testing.assert_allclose(y.data, [0.9, 0.1])


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_gs_rejects_non_positive_temperature(tau):
    with pytest.raises(ValueError):
        dist.gumbel_softmax_sample(np.zeros(2), tau, np.zeros(2))


@pytest.mark.parametrize("tau", [0.3, 2.0])
def test_gs_argmax_frequencies_match_weights(tau):
    rng = np.random.default_rng(0)
    w = np.array([0.5, 0.3, 0.15, 0.05])
    noise = dist.gumbel_noise(rng, (100_000, 4))
    y, _ = dist.gumbel_softmax_sample(np.log(w), tau, noise)
    counts = np.bincount(y.data.argmax(-1), minlength=4)
    assert 0.5 * np.abs(counts / counts.sum() - w).sum() < 0.01
    assert stats.chisquare(counts, w * counts.sum()).pvalue > 0.001


def test_gs_sample_is_on_open_simplex():
    rng = np.random.default_rng(1)
    y, log_y = dist.gumbel_softmax_sample(rng.normal(size=(50, 5)), 0.2,
                                          dist.gumbel_noise(rng, (50, 5)))
    assert np.all(y.data > 0)
    np.testing.assert_allclose(y.data.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(log_y.data), y.data)


@pytest.mark.parametrize("seed", range(5))
def test_gs_gradients(seed):
    rng = np.random.default_rng(seed)
    logits = leaf(rng.normal(size=(3, 4)))
    noise = dist.gumbel_noise(rng, (3, 4))
    c = rng.normal(size=(3, 4))
    f = lambda: (dist.gumbel_softmax_sample(logits, 0.7, noise)[0] * c).sum()
    assert check_grads(f, [logits]) < 1e-4


def test_binary_concrete_density_integrates_to_one():
    logits = np.log([0.3, 0.7])

    def pdf(x):
        ls = np.log([x, 1 - x])
        return math.exp(dist.concrete_log_density(logits, ls, 0.6).item())
    val, _ = integrate.quad(pdf, 0, 1, limit=200)
    assert val == pytest.approx(1.0, abs=1e-6)


def test_concrete_density_k3_integrates_to_one():
    logits = np.log([0.2, 0.5, 0.3])
    tau = 0.8

    def pdf(x2, x1):
        x = np.array([x1, x2, 1 - x1 - x2])
        return math.exp(dist.concrete_log_density(logits, np.log(x), tau).item())
    val, _ = integrate.dblquad(pdf, 0, 1, 0, lambda x1: 1 - x1, epsabs=1e-7)
    assert val == pytest.approx(1.0, abs=1e-4)


# -- Kumaraswamy ------------------------------------------------------------------

def test_kumaraswamy_uniform_case():
    assert dist.kumaraswamy_sample(1.0, 1.0, 0.5).item() == pytest.approx(0.5)


def test_kumaraswamy_density_value():
    assert dist.kumaraswamy_density(0.5, 2.0, 2.0) == pytest.approx(1.5)
    assert math.exp(dist.kumaraswamy_log_density(0.5, 2.0, 2.0).item()) == pytest.approx(1.5)


@pytest.mark.parametrize("a1,a2", [(0.0, 1.0), (1.0, -2.0)])
def test_kumaraswamy_rejects_bad_parameters(a1, a2):
    with pytest.raises(ValueError):
        dist.kumaraswamy_sample(a1, a2, 0.5)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 3.0])
def test_kumaraswamy_one_alpha_is_beta(alpha):
    u = np.random.default_rng(2).uniform(size=100_000)
    x = dist.kumaraswamy_sample(np.ones(1), np.full(1, alpha), u).data
    assert stats.kstest(x, stats.beta(1, alpha).cdf).statistic < 0.01


@pytest.mark.parametrize("a1,a2", [(0.5, 0.5), (2.0, 5.0), (3.0, 1.5)])
def test_kumaraswamy_density_integrates_to_one(a1, a2):
    val, _ = integrate.quad(lambda x: dist.kumaraswamy_density(x, a1, a2), 0, 1, limit=200)
    assert abs(val - 1.0) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_kumaraswamy_sample_gradients(seed):
    rng = np.random.default_rng(seed)
    a1, a2 = leaf(rng.uniform(0.5, 3, 4)), leaf(rng.uniform(0.5, 3, 4))
    u = rng.uniform(0.05, 0.95, 4)
    f = lambda: (dist.kumaraswamy_sample(a1, a2, u) * np.arange(1, 5)).sum()
    assert check_grads(f, [a1, a2]) < 1e-4


# -- stick breaking ----------------------------------------------------------------

def test_stick_break_halving():
    np.testing.assert_allclose(dist.stick_break([0.5, 0.5, 0.5]).data,
                               [0.5, 0.25, 0.125, 0.125])


def test_stick_break_degenerate_first_stick():
    eta = dist.stick_break([1 - 1e-9, 0.3, 0.6]).data
    assert eta[0] > 1 - 1e-8 and np.all(eta[1:] < 1e-8)


@pytest.mark.parametrize("bad", [[0.0, 0.5], [0.5, 1.0], [1.2]])
def test_stick_break_rejects_fractions_outside_unit_interval(bad):
    with pytest.raises(ValueError):
        dist.stick_break(bad)


def test_stick_break_no_sticks_is_point_mass():
    np.testing.assert_array_equal(dist.stick_break(np.zeros(0)).data, [1.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-6, 1 - 1e-6), min_size=1, max_size=12))
def test_stick_break_sums_to_one(fracs):
    eta = dist.stick_break(fracs).data
    assert abs(eta.sum() - 1.0) <= 1e-12 and np.all(eta > 0)


@pytest.mark.parametrize("seed", range(3))
def test_stick_break_gradients(seed):
    rng = np.random.default_rng(seed)
    v = leaf(rng.uniform(0.1, 0.9, 4))
    c = rng.normal(size=5)
    assert check_grads(lambda: (dist.stick_break(v) * c).sum(), [v]) < 1e-4


def test_stick_params_positive_and_point_estimate_on_simplex():
    sp = dist.StickParams.from_positive([2.0, 0.5], [3.0, 0.7])
    np.testing.assert_allclose(sp.a1().data, [2.0, 0.5])
    eta = sp.point_estimate()
    assert eta.shape == (3,) and abs(eta.sum() - 1) < 1e-12
    # mode of Kumaraswamy(2, 3)
    assert eta[0] == pytest.approx(((2 - 1) / (2 * 3 - 1)) ** 0.5)


def test_gem_prior_softplus():
    p = dist.GemPrior(2.5)
    assert p.value == pytest.approx(2.5)
    assert "gem_alpha" in p.parameters()
    assert dist.GemPrior(1.0, learnable=False).parameters() == {}


# -- KL --------------------------------------------------------------------------

@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
def test_kl_zero_when_posterior_equals_prior(alpha):
    q = dist.StickParams.from_positive(np.ones(3), np.full(3, alpha))
    kl, _ = dist.kl_sticks_mc(q, dist.GemPrior(alpha), 10_000, np.random.default_rng(0))
    assert abs(kl.item()) < 0.02


def _kl_quadrature(a1, a2, alpha, n=10_000):
    x = np.linspace(0, 1, n + 2)[1:-1]
    q = dist.kumaraswamy_density(x, a1, a2)
    p = stats.beta(1, alpha).pdf(x)
    return np.trapezoid(q * np.log(q / p), x)


def test_kl_matches_quadrature():
    q = dist.StickParams.from_positive([2.0], [2.0])
    kl, _ = dist.kl_sticks_mc(q, dist.GemPrior(1.0), 10_000, np.random.default_rng(1))
    assert kl.item() == pytest.approx(_kl_quadrature(2.0, 2.0, 1.0), abs=0.02)


@pytest.mark.parametrize("seed", range(10))
def test_kl_estimate_not_significantly_negative(seed):
    rng = np.random.default_rng(seed)
    q = dist.StickParams.from_positive(rng.uniform(0.3, 4, 3), rng.uniform(0.3, 4, 3))
    kl, se = dist.kl_sticks_mc(q, dist.GemPrior(rng.uniform(0.3, 3)), 2000, rng)
    assert kl.item() >= -3 * se


def test_kl_is_differentiable_in_q_and_alpha():
    q = dist.StickParams.from_positive([1.5, 0.8], [2.0, 1.2])
    prior = dist.GemPrior(1.3)
    params = list(q.parameters().values()) + [prior.raw]

    def f():
        return dist.kl_sticks_mc(q, prior, 16, np.random.default_rng(3))[0]
    assert check_grads(f, params) < 1e-4


def test_gs_rejects_non_finite_weights():
    with pytest.raises(ad.NonFiniteError):
        dist.gumbel_softmax_sample(np.array([np.nan, 0.0]), 1.0, np.zeros(2))
