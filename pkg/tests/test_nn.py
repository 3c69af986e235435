import numpy as np
import pytest

from consistent_diffusion.core import perturb
from consistent_diffusion.gmm import GaussianMixture
from consistent_diffusion.losses import TrainConfig, train
from consistent_diffusion.nn import (
    MLP,
    Adam,
    Conditioning,
    DenoiserConfig,
    DenoiserNet,
    fourier_frequencies,
    gradcheck,
    silu,
    silu_grad,
)


def small_net(zero_head=False, dim=2, speaker_dim=3, hidden=8, seed=0):
    return DenoiserNet(DenoiserConfig(dim=dim, speaker_dim=speaker_dim, hidden=hidden, fourier_channels=4, seed=seed), zero_head=zero_head)


def probe_batch(net, n=5, seed=1):
    rng = np.random.default_rng(seed)
    c = net.config
    x = rng.standard_normal((n, c.dim)) * 2
    sigma = np.exp(rng.uniform(np.log(0.01), np.log(10), n))
    cond = Conditioning(rng.standard_normal((n, c.dim)), rng.standard_normal((n, c.speaker_dim)))
    w = rng.standard_normal((n, c.dim))
    return x, sigma, cond, w


def weighted_loss(net, x, sigma, cond, w):
    """Scalar test loss sum(w * h) + 0.5 * sum(h^2) with gradients."""

    def fn():
        out, cache = net.forward(x, sigma, cond)
        grads, _ = net.backward(cache, w + out)
        return float(np.sum(w * out) + 0.5 * np.sum(out * out)), grads

    return fn


def test_silu_grad_matches_finite_differences():
    z = np.linspace(-8, 8, 101)
    h = 1e-6
    np.testing.assert_allclose(silu_grad(z), (silu(z + h) - silu(z - h)) / (2 * h), atol=1e-9)


def test_fourier_frequencies():
    f = fourier_frequencies(16)
    assert len(f) == 8
    assert f[0] == 1 / 16 and np.isclose(f[-1], 4.0)
    with pytest.raises(ValueError):
        fourier_frequencies(3)


def test_default_architecture():
    net = DenoiserNet(DenoiserConfig(dim=16))
    assert net.mlp.sizes == [2 * 16 + 16 + 16, 128, 128, 16]
    expected = sum(a * b + b for a, b in zip(net.mlp.sizes[:-1], net.mlp.sizes[1:]))
    assert net.n_params() == expected


def test_zero_head_outputs_zero():
    net = DenoiserNet(DenoiserConfig(dim=2, speaker_dim=3))
    x, sigma, cond, _ = probe_batch(net)
    np.testing.assert_array_equal(net(x, sigma, cond), np.zeros_like(x))


def test_forward_is_deterministic():
    a = small_net(seed=4)
    b = small_net(seed=4)
    x, sigma, cond, _ = probe_batch(a)
    np.testing.assert_array_equal(a(x, sigma, cond), b(x, sigma, cond))
    np.testing.assert_array_equal(a(x, sigma, cond), a(x, sigma, cond))


def test_output_dimension_matches_data():
    net = small_net(dim=5, speaker_dim=0)
    assert net(np.zeros((7, 5)), 1.0).shape == (7, 5)


@pytest.mark.parametrize(
    "x,cond",
    [
        (np.zeros((3, 3)), None),
        (np.zeros(2), None),
        (np.zeros((3, 2)), Conditioning(mu=np.zeros((3, 3)))),
        (np.zeros((3, 2)), Conditioning(speaker=np.zeros((2, 3)))),
    ],
)
def test_shape_errors(x, cond):
    with pytest.raises(ValueError):
        small_net()(x, 1.0, cond)


def test_nonfinite_input_is_numeric_error():
    x = np.zeros((2, 2))
    x[1, 0] = np.nan
    with pytest.raises(FloatingPointError):
        small_net()(x, 1.0)


def test_nonpositive_sigma_rejected():
    with pytest.raises(ValueError):
        small_net()(np.zeros((1, 2)), 0.0)


def test_input_scaling_stays_bounded():
    net = small_net(dim=1, speaker_dim=0)
    rng = np.random.default_rng(0)
    for sigma in np.geomspace(0.002, 15.0, 12):
        x0 = rng.standard_normal((10_000, 1))
        xt = perturb(x0, sigma, rng.standard_normal((10_000, 1)))
        feats, _ = net._features(xt, sigma, None)
        assert np.abs(feats[:, 0]).max() <= 6.0


def test_zero_upstream_gives_zero_gradients():
    net = small_net()
    x, sigma, cond, _ = probe_batch(net)
    _, cache = net.forward(x, sigma, cond)
    grads, inputs = net.backward(cache, np.zeros_like(x))
    for g in list(grads.values()) + list(inputs.values()):
        assert not np.any(g)


def test_identical_rows_scale_gradient():
    # BLAS picks different kernels for 1 and n rows, so equality holds to rounding only
    net = small_net()
    x, sigma, cond, w = probe_batch(net, n=1)
    _, c1 = net.forward(x, sigma, cond)
    g1, _ = net.backward(c1, w)
    for n in (2, 16):
        xs = np.repeat(x, n, 0)
        cn = Conditioning(np.repeat(cond.mu, n, 0), np.repeat(cond.speaker, n, 0))
        _, cache = net.forward(xs, np.repeat(sigma, n), cn)
        gn, _ = net.backward(cache, np.repeat(w, n, 0))
        for k in g1:
            np.testing.assert_allclose(gn[k], n * g1[k], rtol=1e-13, atol=1e-15)


def test_backward_is_reproducible():
    net = small_net()
    x, sigma, cond, w = probe_batch(net, n=64)
    _, cache = net.forward(x, sigma, cond)
    a, _ = net.backward(cache, w)
    b, _ = net.backward(cache, w)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_gradcheck_passes_on_fresh_net():
    net = small_net(hidden=32, zero_head=False)
    rep = gradcheck(weighted_loss(net, *probe_batch(net)), net.params, tol=1e-4)
    assert rep.passed and rep.n_checked == 200
    assert rep.max_rel_error < 1e-6


def test_gradcheck_detects_corrupted_weight():
    net = small_net(hidden=4, zero_head=False)
    assert net.n_params() <= 200
    fn = weighted_loss(net, *probe_batch(net))

    def corrupted():
        loss, grads = fn()
        grads["W1"] = grads["W1"].copy()
        grads["W1"][0, 0] *= 2.0
        return loss, grads

    assert gradcheck(fn, net.params, tol=1e-4).passed
    rep = gradcheck(corrupted, net.params, tol=1e-4)
    assert not rep.passed and rep.worst == "W1[0]"


def test_gradcheck_zero_tolerance_fails():
    net = small_net(zero_head=False)
    assert not gradcheck(weighted_loss(net, *probe_batch(net)), net.params, tol=0.0).passed


def test_input_gradients_match_finite_differences():
    net = small_net(zero_head=False)
    x, sigma, cond, w = probe_batch(net)
    _, cache = net.forward(x, sigma, cond)
    _, inputs = net.backward(cache, w)

    def value(xx, mu, spk):
        return float(np.sum(w * net(xx, sigma, Conditioning(mu, spk))))

    h = 1e-6
    for name, arr in (("x", x), ("mu", cond.mu), ("speaker", cond.speaker)):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            args = {"x": x.copy(), "mu": cond.mu.copy(), "speaker": cond.speaker.copy()}
            args[name][idx] += h
            up = value(args["x"], args["mu"], args["speaker"])
            args[name][idx] -= 2 * h
            fd[idx] = (up - value(args["x"], args["mu"], args["speaker"])) / (2 * h)
        np.testing.assert_allclose(inputs[name], fd, rtol=1e-6, atol=1e-8)


def test_mlp_requires_two_sizes():
    with pytest.raises(ValueError):
        MLP([3])


def test_adam_single_step_by_hand():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.25])}
    opt = Adam(lr=0.1)
    opt.step(p, g)
    # first bias-corrected step is lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0]) - 0.1 * g["w"] / (np.abs(g["w"]) + 1e-8)
    np.testing.assert_allclose(p["w"], expected, rtol=1e-15)


def test_adam_state_round_trip():
    rng = np.random.default_rng(0)
    p1 = {"a": rng.standard_normal(3), "b": rng.standard_normal((2, 2))}
    p2 = {k: v.copy() for k, v in p1.items()}
    o1 = Adam(lr=0.01)
    for _ in range(3):
        o1.step(p1, {k: rng.standard_normal(v.shape) for k, v in p1.items()})
    o2 = Adam(lr=0.01)
    o2.load_state_dict(o1.state_dict())
    p2 = {k: v.copy() for k, v in p1.items()}
    g = {k: rng.standard_normal(v.shape) for k, v in p1.items()}
    o1.step(p1, g)
    o2.step(p2, g)
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])


@pytest.mark.slow
def test_point_mass_training_learns_constant():
    c = np.array([1.5, -2.0])
    gmm = GaussianMixture(np.array([1.0]), c[None, :], np.array([1e-12]))
    net = DenoiserNet(DenoiserConfig(dim=2, speaker_dim=0, hidden=32, seed=0))
    train(net, gmm, TrainConfig(lam=0.0, n_steps=600, batch_size=128, lr=3e-3, seed=0))
    rng = np.random.default_rng(9)
    for sigma in (0.1, 0.3, 1.0):
        xt = c + sigma * rng.standard_normal((200, 2))
        err = np.linalg.norm(net(xt, sigma) - c, axis=1)
        assert err.mean() < 0.05 * np.linalg.norm(c)
