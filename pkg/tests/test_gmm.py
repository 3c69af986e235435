import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid
from scipy.stats import multivariate_normal

from consistent_diffusion.gmm import (
    GaussianMixture,
    exact_denoiser,
    exact_score,
    log_density,
    marginal_at,
    sample,
)
from consistent_diffusion.samplers import SamplerParams, heun_ode_sample, time_grid

from conftest import mixture_1d

STD_NORMAL = GaussianMixture(np.array([1.0]), np.array([[0.0]]), np.array([1.0]))


def reference_log_density(gmm, x):
    """Sum of scipy normal pdfs, written without any log-domain tricks."""
    total = np.zeros(len(x))
    for w, m, v in zip(gmm.weights, gmm.means, gmm.variances):
        total += w * multivariate_normal(m, v * np.eye(gmm.dim)).pdf(x).reshape(-1)
    return np.log(total)


@st.composite
def mixtures(draw):
    k = draw(st.integers(1, 4))
    d = draw(st.integers(1, 3))
    raw = np.array(draw(st.lists(st.floats(0.1, 1.0), min_size=k, max_size=k)))
    means = np.array(draw(st.lists(st.floats(-3, 3), min_size=k * d, max_size=k * d))).reshape(k, d)
    var = np.array(draw(st.lists(st.floats(0.01, 2.0), min_size=k, max_size=k)))
    return GaussianMixture(raw / raw.sum(), means, var)


# --- construction ------------------------------------------------------------


@pytest.mark.parametrize(
    "w,m,v",
    [
        ([0.5, 0.6], [[0.0], [1.0]], [1.0, 1.0]),
        ([1.2, -0.2], [[0.0], [1.0]], [1.0, 1.0]),
        ([0.5, 0.5], [[0.0], [1.0]], [1.0, 0.0]),
        ([0.5, 0.5], [[0.0]], [1.0, 1.0]),
    ],
)
def test_invalid_mixtures_rejected(w, m, v):
    with pytest.raises(ValueError):
        GaussianMixture(np.array(w), np.array(m), np.array(v))


def test_weights_sum_tolerance():
    GaussianMixture(np.array([0.5, 0.5 + 5e-13]), np.zeros((2, 1)), np.ones(2))
    with pytest.raises(ValueError):
        GaussianMixture(np.array([0.5, 0.5 + 1e-10]), np.zeros((2, 1)), np.ones(2))


def test_spec_round_trip(gmm):
    again = GaussianMixture.from_spec(gmm.to_spec())
    np.testing.assert_array_equal(again.weights, gmm.weights)
    np.testing.assert_array_equal(again.means, gmm.means)
    np.testing.assert_array_equal(again.variances, gmm.variances)


def test_spec_rejects_mixed_dims():
    with pytest.raises(ValueError):
        GaussianMixture.from_spec([{"weight": 0.5, "mean": [0.0], "var": 1.0},
                                   {"weight": 0.5, "mean": [0.0, 1.0], "var": 1.0}])


def test_moments_match_direct_computation(gmm):
    x = sample(gmm, np.random.default_rng(0), 200_000)
    np.testing.assert_allclose(x.mean(0), gmm.mean(), atol=0.02)
    np.testing.assert_allclose(np.atleast_2d(np.cov(x, rowvar=False)), gmm.covariance(), atol=0.03)


# --- marginal ------------------------------------------------------------------


def test_marginal_examples():
    np.testing.assert_array_equal(marginal_at(STD_NORMAL, 1.0).variances, [2.0])
    two = GaussianMixture(np.array([0.5, 0.5]), np.zeros((2, 1)), np.array([1.0, 4.0]))
    np.testing.assert_array_equal(marginal_at(two, 2.0).variances, [5.0, 8.0])
    np.testing.assert_allclose(marginal_at(two, 0.002).variances, [1.0, 4.0], rtol=1e-5)


def test_marginal_matches_monte_carlo(gmm):
    rng = np.random.default_rng(5)
    t = 0.7
    x = sample(gmm, rng, 200_000) + t * rng.standard_normal((200_000, gmm.dim))
    m = marginal_at(gmm, t)
    np.testing.assert_allclose(np.atleast_2d(np.cov(x, rowvar=False)), m.covariance(), atol=0.03)


# --- score and denoiser ----------------------------------------------------


def test_score_examples():
    np.testing.assert_allclose(exact_score(STD_NORMAL, np.array([[2.0]]), 1.0), [[-1.0]], rtol=1e-15)
    sym = GaussianMixture(np.array([0.5, 0.5]), np.array([[-1.5, 0.5], [1.5, -0.5]]), np.array([0.3, 0.3]))
    np.testing.assert_allclose(exact_score(sym, np.zeros((1, 2)), 0.4), 0.0, atol=1e-15)


def test_single_gaussian_score_is_linear():
    g = GaussianMixture(np.array([1.0]), np.array([[0.7]]), np.array([0.3]))
    x = np.linspace(-5, 5, 11)[:, None]
    s = exact_score(g, x, 0.5)
    np.testing.assert_allclose(np.diff(s[:, 0]) / np.diff(x[:, 0]), -1.0 / (0.3 + 0.25), rtol=1e-12)


def test_denoiser_examples():
    np.testing.assert_allclose(exact_denoiser(STD_NORMAL, np.array([[2.0]]), 1.0), [[1.0]], rtol=1e-15)


def test_point_mass_component_collapses():
    g = GaussianMixture(np.array([1.0]), np.array([[1.5, -2.0]]), np.array([1e-8]))
    x = np.random.default_rng(0).normal(size=(20, 2)) * 3
    np.testing.assert_allclose(exact_denoiser(g, x, 0.5), np.tile([1.5, -2.0], (20, 1)), atol=1e-6)


def test_tweedie_identity_on_closed_forms(gmm):
    rng = np.random.default_rng(7)
    t = np.exp(rng.uniform(np.log(0.002), np.log(15.0), 1000))
    x = sample(gmm, rng, 1000) + t[:, None] * rng.standard_normal((1000, gmm.dim))
    lhs = exact_denoiser(gmm, x, t)
    rhs = x + (t * t)[:, None] * exact_score(gmm, x, t)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10 * max(1.0, np.abs(x).max()))


@settings(max_examples=60, deadline=None)
@given(g=mixtures(), t=st.floats(0.01, 10.0), seed=st.integers(0, 2**16))
def test_tweedie_identity_random_mixtures(g, t, seed):
    x = np.random.default_rng(seed).normal(size=(8, g.dim)) * 3
    lhs = exact_denoiser(g, x, t)
    rhs = x + t * t * exact_score(g, x, t)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10 * max(1.0, np.abs(x).max()))


@settings(max_examples=60, deadline=None)
@given(g=mixtures(), t=st.floats(0.01, 10.0), seed=st.integers(0, 2**16))
def test_denoiser_is_inside_component_hull_blend(g, t, seed):
    # each per-component posterior mean lies between x and m_k, so the result is bounded
    x = np.random.default_rng(seed).normal(size=(8, g.dim)) * 3
    h = exact_denoiser(g, x, t)
    lo = np.minimum(x, g.means.min(0))
    hi = np.maximum(x, g.means.max(0))
    assert np.all(h >= lo - 1e-9) and np.all(h <= hi + 1e-9)


def test_score_matches_finite_differences(gmm):
    rng = np.random.default_rng(3)
    step = 1e-5
    for t in (0.05, 0.5, 2.0, 10.0):
        m = marginal_at(gmm, t)
        x = sample(gmm, rng, 50) + t * rng.standard_normal((50, gmm.dim))
        fd = np.empty_like(x)
        for j in range(gmm.dim):
            e = np.zeros(gmm.dim)
            e[j] = step
            fd[:, j] = (reference_log_density(m, x + e) - reference_log_density(m, x - e)) / (2 * step)
        s = exact_score(gmm, x, t)
        np.testing.assert_allclose(s, fd, rtol=1e-6, atol=1e-6 * np.abs(s).max())


def test_no_overflow_far_from_data(gmm):
    x = np.full((3, gmm.dim), 1e3)
    x[1] *= -1
    for t in (0.002, 1.0):
        s = exact_score(gmm, x, t)
        h = exact_denoiser(gmm, x, t)
        assert np.all(np.isfinite(s)) and np.all(np.isfinite(h))
        assert np.all(np.isfinite(log_density(gmm, x)))


# --- log density and sampling ----------------------------------------------


def test_log_density_examples():
    np.testing.assert_allclose(log_density(STD_NORMAL, np.array([[0.0]])), [-0.5 * np.log(2 * np.pi)], rtol=1e-15)
    np.testing.assert_allclose(log_density(STD_NORMAL, np.array([[0.0]])), [-0.9189385], atol=1e-7)
    twin = GaussianMixture(np.array([0.5, 0.5]), np.array([[0.3], [0.3]]), np.array([2.0, 2.0]))
    one = GaussianMixture(np.array([1.0]), np.array([[0.3]]), np.array([2.0]))
    x = np.linspace(-4, 4, 9)[:, None]
    np.testing.assert_allclose(log_density(twin, x), log_density(one, x), rtol=1e-14)


def test_log_density_matches_scipy(gmm):
    x = sample(gmm, np.random.default_rng(2), 100)
    np.testing.assert_allclose(log_density(gmm, x), reference_log_density(gmm, x), rtol=1e-12)


def test_density_integrates_to_one():
    g = mixture_1d()
    grid = np.linspace(-12, 14, 200_001)
    mass = trapezoid(np.exp(log_density(g, grid[:, None])), grid)
    assert abs(mass - 1.0) < 1e-4


def test_sample_moments_standard_normal():
    x = sample(STD_NORMAL, np.random.default_rng(11), 100_000)
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.02


def test_sample_degenerate_component():
    g = GaussianMixture(np.array([1.0]), np.array([[2.0, -1.0]]), np.array([1e-12]))
    x = sample(g, np.random.default_rng(0), 100)
    np.testing.assert_allclose(x, np.tile([2.0, -1.0], (100, 1)), atol=1e-5)


def test_sample_is_seed_deterministic(gmm):
    a = sample(gmm, np.random.default_rng(42), 500)
    b = sample(gmm, np.random.default_rng(42), 500)
    np.testing.assert_array_equal(a, b)


def test_sample_rejects_nonpositive_count(gmm):
    with pytest.raises(ValueError):
        sample(gmm, np.random.default_rng(0), 0)


# --- transport ---------------------------------------------------------------


def test_probability_flow_transport_recovers_moments():
    g = mixture_1d()
    rng = np.random.default_rng(8)
    params = SamplerParams(n_steps=200)
    grid = time_grid(params)
    start = sample(marginal_at(g, grid[0]), rng, 10_000)
    x = heun_ode_sample(g.as_denoiser(), start, grid)
    assert abs(x.mean() / g.mean()[0] - 1) < 0.02
    assert abs(x.var() / g.covariance()[0, 0] - 1) < 0.02
