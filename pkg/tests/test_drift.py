import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import mixture_1d
from consistent_diffusion.drift import (
    DEFAULT_T_GRID,
    CompareSettings,
    compare_cdm_vs_dsm,
    consistency_violation,
    consistency_violation_from_draws,
    default_gmm_2d,
    distribution_distance,
    energy_distance,
)
from consistent_diffusion.core import NoiseSchedule
from consistent_diffusion.gmm import GaussianMixture, sample
from consistent_diffusion.losses import TrainConfig, sample_cdm_draws


def naive_energy_distance(x, y):
    """Direct double loop over all pairs, diagonal included."""
    def avg(a, b):
        return sum(math.dist(p, q) for p in a for q in b) / (len(a) * len(b))

    return 2 * avg(x, y) - avg(x, x) - avg(y, y)


def test_energy_distance_matches_naive_pairs():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((30, 2)), rng.standard_normal((25, 2)) + 0.5
    np.testing.assert_allclose(energy_distance(x, y), naive_energy_distance(x, y), rtol=1e-12)
    np.testing.assert_allclose(energy_distance(x, y, chunk=7), energy_distance(x, y), rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 40), st.integers(1, 3))
def test_energy_distance_symmetric(seed, n, d):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((n, d)), rng.standard_normal((n + 3, d))
    np.testing.assert_allclose(energy_distance(x, y), energy_distance(y, x), rtol=1e-12, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40), st.floats(0.0, 0.5))
def test_energy_distance_nonnegative(seed, n, shift):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((n, 2)), rng.standard_normal((n, 2)) + shift
    assert energy_distance(x, y) >= 0.0


def test_energy_distance_zero_for_identical_sets_and_positive_for_shift():
    x = np.random.default_rng(1).standard_normal((400, 2))
    assert energy_distance(x, x) == 0.0
    assert energy_distance(x, x.copy()[::-1]) < 1e-12
    assert energy_distance(x, x + 3.0) > 1.0


def test_distribution_distance_self_below_noise_floor():
    gmm = default_gmm_2d()
    ref = sample(gmm, np.random.default_rng(0), 10_000)
    # floor: two independent oracle draws of the same size
    floor = energy_distance(sample(gmm, np.random.default_rng(7), 4000), sample(gmm, np.random.default_rng(8), 10_000))
    same = distribution_distance(sample(gmm, np.random.default_rng(1), 4000), gmm, reference=ref)
    shifted = distribution_distance(sample(gmm, np.random.default_rng(1), 4000) + 0.3, gmm, reference=ref)
    assert same.energy_distance < 3 * floor
    assert shifted.energy_distance > 10 * floor
    assert same.mean_error < 0.05 and same.cov_error < 0.1


@pytest.mark.parametrize("gmm_fn", [mixture_1d, default_gmm_2d])
def test_distribution_distance_unit_shift_gives_sqrt_d(gmm_fn):
    gmm = gmm_fn()
    x = sample(gmm, np.random.default_rng(2), 20_000) + 1.0
    m = distribution_distance(x, gmm, rng=np.random.default_rng(3))
    assert abs(m.mean_error - math.sqrt(gmm.dim)) < 0.05
    assert m.n_samples == 20_000 and m.n_reference == 10_000


def test_distribution_distance_requires_1000_samples():
    with pytest.raises(ValueError):
        distribution_distance(np.zeros((999, 2)), default_gmm_2d())


def test_consistency_violation_constant_denoiser_is_zero():
    gmm = default_gmm_2d()
    const = lambda x, t, cond=None: np.broadcast_to(np.array([0.3, -1.0]), x.shape).copy()  # noqa: E731
    cv = consistency_violation(const, gmm, DEFAULT_T_GRID, 200, TrainConfig(), np.random.default_rng(0))
    assert list(cv) == list(DEFAULT_T_GRID)
    assert all(v == 0.0 for v in cv.values())


def test_consistency_violation_permutation_invariant():
    gmm = default_gmm_2d()
    rng = np.random.default_rng(0)
    x0 = sample(gmm, rng, 300)
    draws = sample_cdm_draws(rng, 300, 2, TrainConfig(), NoiseSchedule(), t=0.7)
    a = consistency_violation_from_draws(gmm.as_denoiser(), x0, draws)
    perm = np.random.default_rng(5).permutation(300)
    draws.t, draws.z, draws.t_prime = draws.t[perm], draws.z[perm], draws.t_prime[perm]
    draws.rollout_noise = draws.rollout_noise[:, :, perm]
    b = consistency_violation_from_draws(gmm.as_denoiser(), x0[perm], draws)
    assert a == b


def test_consistency_violation_deterministic_and_probe_minimum():
    gmm = default_gmm_2d()
    run = lambda: consistency_violation(  # noqa: E731
        gmm.as_denoiser(), gmm, (0.1, 1.0), 100, TrainConfig(), np.random.default_rng(4)
    )
    assert run() == run()
    with pytest.raises(ValueError):
        consistency_violation(gmm.as_denoiser(), gmm, (0.1,), 99, TrainConfig(), np.random.default_rng(0))


SMALL = CompareSettings(n_samples=1000, n_probes=100, also_18_steps=False)


def test_compare_oracle_null_arms_match():
    report = compare_cdm_vs_dsm(settings=SMALL, oracle=True)
    assert report["oracle"] is True and report["seeds"] == [0, 1, 2, 3, 4]
    for row in report["per_seed"].values():
        assert row["cdm"] == row["dsm"]
    assert report["medians"]["cdm"] == report["medians"]["dsm"]
    med = report["medians"]["cdm"]
    assert set(med) == {"consistency_violation_mean"} | {
        f"sampling_8.{m}" for m in ("energy_distance", "mean_error", "cov_error", "mean_log_likelihood")
    }
    assert all(np.isfinite(v) for v in med.values())


def test_compare_requires_five_seeds():
    with pytest.raises(ValueError):
        compare_cdm_vs_dsm(seeds=(0, 1, 2, 3), settings=SMALL, oracle=True)


def test_compare_trained_report_is_complete_and_deterministic():
    cs = CompareSettings(n_train_steps=5, batch_size=32, hidden=8, n_samples=1000, n_probes=100,
                         also_18_steps=False)
    gmm = GaussianMixture(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.array([0.1, 0.1]))
    a = compare_cdm_vs_dsm(gmm, settings=cs)
    b = compare_cdm_vs_dsm(gmm, settings=cs)
    assert a == b
    for row in a["per_seed"].values():
        for arm in ("cdm", "dsm"):
            assert {"consistency_violation", "consistency_violation_mean", "sampling_8", "final_L_DSM"} <= set(row[arm])
