import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iqdet.geometry import DomainError
from iqdet.qdist import (
    SIGMA_FLOOR, QualityGMM, component_value, density, density_grad_many, quality_target, sample_offsets,
    sample_offsets_arrays,
)
from oracles import central_diff, rel_err, truncated_mixture_bins


def _random_gmm(rng, k=2):
    return QualityGMM(rng.uniform(-0.8, 0.8, (k, 2)), rng.uniform(0.2, 1.5, (k, 2)), rng.uniform(0.1, 1.0, k))


def test_peak_is_exactly_one():
    g = QualityGMM(np.array([[0.2, -0.3]]), np.array([[0.4, 0.7]]), np.array([1.0]))
    assert density(g, (0.2, -0.3)) == 1.0


@pytest.mark.parametrize("d,expected", [
    ((0.5, 0.0), math.exp(-0.5)),
    ((0.0, -0.5), math.exp(-0.5)),
    ((0.5, 0.5), math.exp(-1.0)),
])
def test_one_sigma_spot_values(d, expected):
    g = QualityGMM.fixed(1, 0.0, 0.5, 1.0)
    assert density(g, d) == pytest.approx(expected, abs=1e-12)


def test_two_sigma_diagonal():
    g = QualityGMM.fixed(1, 0.0, 0.5, 1.0)
    assert density(g, (1.0, 1.0)) == pytest.approx(math.exp(-4.0), abs=1e-12)


def test_density_is_sum_of_components():
    rng = np.random.default_rng(0)
    g = _random_gmm(rng, 3)
    for d in rng.uniform(-1, 1, (20, 2)):
        total = sum(g.pi[k] * component_value(g, k, d) for k in range(3))
        assert density(g, d) == pytest.approx(total, rel=1e-14)


def test_quality_is_capped_at_one():
    g = QualityGMM(np.zeros((2, 2)), np.ones((2, 2)), np.array([0.9, 0.9]))
    assert density(g, (0, 0)) == pytest.approx(1.8)
    assert quality_target(g, (0, 0)) == 1.0


def test_fixed_matches_single_gaussian():
    for k in (1, 2, 4):
        g = QualityGMM.fixed(k, 0.0, 0.7, 0.8)
        one = QualityGMM.fixed(1, 0.0, 0.7, 0.8)
        for d in [(0, 0), (0.3, -0.9), (1, 1)]:
            assert density(g, d) == pytest.approx(density(one, d), rel=1e-14)


def test_validation_errors():
    with pytest.raises(DomainError):
        QualityGMM(np.zeros((2, 2)), np.zeros((2, 2)), np.ones(2))
    with pytest.raises(DomainError):
        QualityGMM(np.zeros((2, 2)), np.ones((2, 2)), np.array([1.0, -0.1]))
    with pytest.raises(DomainError):
        QualityGMM(np.zeros((2, 2)), np.ones((3, 2)), np.ones(2))
    with pytest.raises(DomainError):
        QualityGMM.from_json({"mu": [[0, 0]]})


def test_json_round_trip():
    g = _random_gmm(np.random.default_rng(1))
    back = QualityGMM.from_json(g.to_json())
    np.testing.assert_array_equal(back.mu, g.mu)
    np.testing.assert_array_equal(back.sigma, g.sigma)
    np.testing.assert_array_equal(back.pi, g.pi)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    g = _random_gmm(rng, 3)
    perm = rng.permutation(3)
    h = QualityGMM(g.mu[perm], g.sigma[perm], g.pi[perm])
    d = rng.uniform(-1, 1, 2)
    assert density(h, d) == pytest.approx(density(g, d), rel=1e-13)


def test_density_gradients_finite_differences():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 4))
        mu, sigma, pi = rng.uniform(-0.8, 0.8, (k, 2)), rng.uniform(0.2, 1.5, (k, 2)), rng.uniform(0.1, 1.0, k)
        d = rng.uniform(-1, 1, (1, 2))
        p, dmu, dsig, dpi, dd = density_grad_many(mu, sigma, pi, d)
        f = lambda m=mu, s=sigma, w=pi, x=d: density_grad_many(m, s, w, x)[0][0]
        for analytic, numeric in [
            (dmu[0], central_diff(lambda m: f(m=m), mu)),
            (dsig[0], central_diff(lambda s: f(s=s), sigma)),
            (dpi[0], central_diff(lambda w: f(w=w), pi)),
            (dd[0], central_diff(lambda x: f(x=x), d)[0]),
        ]:
            worst = max(worst, rel_err(analytic, numeric))
    assert worst < 1e-6


def test_sampler_deterministic_and_inside():
    g = _random_gmm(np.random.default_rng(3))
    a, qa = sample_offsets(g, 500, rng_seed=7)
    b, qb = sample_offsets(g, 500, rng_seed=7)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(qa, qb)
    assert np.all(np.abs(a) < 1.0)
    assert np.all((qa >= 0) & (qa <= 1))


def test_sampler_concentrates_at_floor_sigma():
    g = QualityGMM(np.array([[0.3, -0.4]]), np.full((1, 2), SIGMA_FLOOR), np.array([1.0]))
    d, _ = sample_offsets(g, 1000, rng_seed=0)
    assert np.all(np.abs(d - g.mu[0]) < 0.01)


def test_sampler_clamps_after_exhausting_rejections():
    # A mean far outside the square never yields an accepted draw.
    d = sample_offsets_arrays(np.array([[40.0, 0.0]]), np.full((1, 2), 0.01), np.array([1.0]), 10,
                              np.random.default_rng(0))
    np.testing.assert_allclose(d[:, 0], 1.0 - 1e-6)


def _tv_to_quadrature(g, count, seed):
    d, _ = sample_offsets(g, count, rng_seed=seed)
    hist, _, _ = np.histogram2d(d[:, 1], d[:, 0], bins=20, range=[[-1, 1], [-1, 1]])
    return 0.5 * np.abs(hist / len(d) - truncated_mixture_bins(g.mu, g.sigma, g.pi)).sum(), d


# Multinomial noise alone gives TV near 0.025 at 1e5 draws on 400 bins, so these
# checks use 1e6 draws (noise TV near 0.008) to make 0.02 a real test of the sampler.
def test_sampler_matches_quadrature():
    tv, d = _tv_to_quadrature(QualityGMM.fixed(2, 0.0, 1.0, 1.0), 1_000_000, 11)
    assert tv < 0.02
    assert np.all(np.abs(d.mean(axis=0)) < 0.02)


def test_sampler_matches_quadrature_asymmetric_mixture():
    g = QualityGMM(np.array([[-0.5, 0.2], [0.6, -0.3]]), np.array([[0.3, 0.5], [0.8, 0.2]]), np.array([0.3, 0.9]))
    tv, _ = _tv_to_quadrature(g, 1_000_000, 12)
    assert tv < 0.02


def test_quadrature_oracle_detects_wrong_sigma():
    # Guards against an oracle too loose to notice a mis-scaled sampler.
    wrong = QualityGMM.fixed(2, 0.0, 0.7, 1.0)
    d, _ = sample_offsets(wrong, 1_000_000, rng_seed=13)
    hist, _, _ = np.histogram2d(d[:, 1], d[:, 0], bins=20, range=[[-1, 1], [-1, 1]])
    target = truncated_mixture_bins(np.zeros((2, 2)), np.ones((2, 2)), np.ones(2))
    assert 0.5 * np.abs(hist / len(d) - target).sum() > 0.05
