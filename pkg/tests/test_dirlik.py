import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from dmrank.dirlik import (GaussianSpec, ObservedDirection, erfc_hazard, erfc_scaled,
                           log_erfc, log_pair_likelihood, marginalize,
                           naive_log_pair_likelihood, quad_stats, quadrature_oracle)
from dmrank.errors import EmptyComparisonError, SingularCovarianceError

mpmath.mp.dps = 50


def mp_erfcx(x):
    x = mpmath.mpf(x)
    return mpmath.exp(x * x) * mpmath.erfc(x)


def spd(rng, k):
    a = rng.normal(size=(k, k))
    return a @ a.T / k + 0.1 * np.eye(k)


# ---------------------------------------------------------------------------
# erfcx and friends
# ---------------------------------------------------------------------------

def test_erfcx_at_zero():
    assert erfc_scaled(0.0) == 1.0


def test_erfcx_asymptotic_at_ten():
    x = 10.0
    series = 1.0 / (x * math.sqrt(math.pi)) * (1 - 1 / (2 * x**2) + 3 / (4 * x**4) - 15 / (8 * x**6))
    assert abs(erfc_scaled(x) / series - 1) < 1e-6


def test_erfcx_at_one_by_quadrature():
    tail, _ = integrate.quad(lambda t: math.exp(-t * t), 1.0, np.inf, epsabs=1e-15)
    expected = math.exp(1.0) * 2 / math.sqrt(math.pi) * tail
    assert abs(erfc_scaled(1.0) / expected - 1) < 1e-12


def test_erfcx_matches_mpmath_on_dense_grid():
    xs = np.concatenate([np.linspace(-26, 30, 2801), [-1e-8, 1e-8, 1.4999, 1.5, 1.5001]])
    got = erfc_scaled(xs)
    ref = np.array([float(mp_erfcx(x)) for x in xs])
    assert np.max(np.abs(got / ref - 1)) <= 1e-12


def test_erfcx_overflows_to_inf_where_float64_cannot_hold_it():
    # erfcx(-27) ~ 2 exp(729) exceeds the double range.
    assert erfc_scaled(-27.0) == math.inf


def test_erfcx_positive_and_decreasing():
    xs = np.linspace(-26, 30, 5001)
    v = erfc_scaled(xs)
    assert np.all(v > 0)
    assert np.all(np.diff(v) < 0)


def test_erfcx_scalar_and_array_types():
    assert isinstance(erfc_scaled(0.3), float)
    assert erfc_scaled(np.array([0.3, 0.4])).shape == (2,)


@pytest.mark.parametrize("x", [-50.0, -6.0, -1.0, 0.0, 0.5, 3.0, 6.0, 27.0, 50.0])
def test_log_erfc_matches_mpmath(x):
    ref = float(mpmath.log(mpmath.erfc(mpmath.mpf(x))))
    got = float(log_erfc(x))
    assert math.isfinite(got)
    assert abs(got - ref) <= 1e-12 * max(1.0, abs(ref))


def test_hazard_matches_mpmath_and_stays_finite():
    for x in np.linspace(-50, 50, 101):
        h = float(erfc_hazard(x))
        mx = mpmath.mpf(x)
        ref = float(2 * mpmath.exp(-mx * mx) / (mpmath.sqrt(mpmath.pi) * mpmath.erfc(mx)))
        assert math.isfinite(h)
        assert abs(h - ref) <= 1e-11 * max(1.0, abs(ref))


# ---------------------------------------------------------------------------
# quadratic statistics
# ---------------------------------------------------------------------------

def test_quad_stats_identity_example():
    s = quad_stats(ObservedDirection([1.0, 0.0]), GaussianSpec([2.0, 3.0], np.eye(2)), 0.0)
    assert (s.a, s.b, s.c) == pytest.approx((1.0, 2.0, 13.0), abs=1e-14)
    assert s.z == pytest.approx(-math.sqrt(2), abs=1e-14)


def test_quad_stats_hand_inverse_example():
    cov = np.array([[2.0, 1.0], [1.0, 2.0]])
    s = quad_stats(ObservedDirection([1.0, 1.0]), GaussianSpec([1.0, 1.0], cov), 0.3)
    assert (s.a, s.b, s.c) == pytest.approx((2 / 3, 2 / 3, 2 / 3), abs=1e-14)


def test_quad_stats_equal_vectors_are_cauchy_schwarz_tight():
    rng = np.random.default_rng(1)
    cov = spd(rng, 4)
    d = rng.normal(size=4)
    s = quad_stats(ObservedDirection(d), GaussianSpec(d, cov), 0.2)
    assert s.b == pytest.approx(s.a, rel=1e-12)
    assert s.c == pytest.approx(s.a, rel=1e-12)
    assert s.b**2 == pytest.approx(s.a * s.c, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_cauchy_schwarz_holds(seed, k):
    rng = np.random.default_rng(seed)
    s = quad_stats(ObservedDirection(rng.normal(size=k)),
                   GaussianSpec(rng.normal(size=k), spd(rng, k)), 0.5)
    assert s.a > 0 and s.c >= 0
    assert s.b**2 <= s.a * s.c * (1 + 1e-10) + 1e-300


def test_empty_mask_rejected():
    with pytest.raises(EmptyComparisonError, match="empty comparison"):
        quad_stats(ObservedDirection([1.0, 2.0], mask=[False, False]),
                   GaussianSpec([0.0, 0.0], np.eye(2)), 0.0)


def test_zero_difference_rejected():
    with pytest.raises(EmptyComparisonError, match="empty comparison"):
        quad_stats(ObservedDirection([0.0, 0.0]), GaussianSpec([0.0, 0.0], np.eye(2)), 0.0)


def test_singular_covariance_rejected():
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(SingularCovarianceError, match="covariance not invertible"):
        quad_stats(ObservedDirection([1.0, 0.0]), GaussianSpec([0.0, 0.0], cov), 0.0)


def test_gaussian_spec_validation():
    with pytest.raises(ValueError):
        GaussianSpec([0.0, 0.0], np.array([[1.0, 0.5], [0.4, 1.0]]))
    with pytest.raises(ValueError):
        GaussianSpec([0.0], np.eye(2))


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------

def test_one_dimensional_cdf_example():
    v = log_pair_likelihood(ObservedDirection([2.0]), GaussianSpec([1.0], [[1.0]]), 0.0)
    assert math.exp(v) == pytest.approx(0.5 * stats.norm.cdf(1.0), abs=1e-14)
    assert math.exp(v) == pytest.approx(0.42067, abs=1e-5)


def test_zero_mean_zero_margin_reduction():
    rng = np.random.default_rng(3)
    cov = spd(rng, 3)
    d = rng.normal(size=3)
    a = d @ np.linalg.solve(cov, d)
    expected = (-1.5 * math.log(2 * math.pi) - 0.5 * np.linalg.slogdet(cov)[1]
                + 0.5 * math.log(math.pi / (2 * a)))
    got = log_pair_likelihood(ObservedDirection(d), GaussianSpec(np.zeros(3), cov), 0.0)
    assert got == pytest.approx(expected, abs=1e-12)


def test_matches_quadrature_on_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(100):
        k = int(rng.integers(1, 6))
        spec = GaussianSpec(rng.normal(size=k), spd(rng, k))
        direction = ObservedDirection(rng.normal(size=k))
        xi = float(rng.uniform(0, 1))
        closed = math.exp(log_pair_likelihood(direction, spec, xi))
        assert abs(closed / quadrature_oracle(direction, spec, xi) - 1) <= 1e-8


def test_quadrature_tail_vanishes():
    spec = GaussianSpec([1.0, 0.5], np.eye(2))
    direction = ObservedDirection([1.0, 0.0])
    s = quad_stats(direction, spec, 0.0)
    xi = s.b / s.a + 10 * math.sqrt(1 / s.a)
    assert quadrature_oracle(direction, spec, xi) < 1e-10


def test_monotone_decreasing_in_margin():
    rng = np.random.default_rng(5)
    spec = GaussianSpec(rng.normal(size=3), spd(rng, 3))
    direction = ObservedDirection(rng.normal(size=3))
    vals = [log_pair_likelihood(direction, spec, xi) for xi in np.linspace(0, 5, 51)]
    assert np.all(np.diff(vals) < 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 20.0))
def test_scale_property(seed, c):
    # Rescaling the observed difference rescales the ray parameter: L(c d) = L(d) / c
    # once the margin is rescaled too.
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    spec = GaussianSpec(rng.normal(size=k), spd(rng, k))
    d = rng.normal(size=k)
    xi = float(rng.uniform(0, 1))
    base = log_pair_likelihood(ObservedDirection(d), spec, xi)
    scaled = log_pair_likelihood(ObservedDirection(c * d), spec, xi / c)
    assert scaled == pytest.approx(base - math.log(c), abs=1e-10)


def test_finite_for_extreme_z():
    for z in np.linspace(-50, 50, 201):
        xi = 0.3
        mean = np.array([xi - math.sqrt(2) * z, 0.4])
        direction = ObservedDirection([1.0, 0.0])
        spec = GaussianSpec(mean, np.eye(2))
        assert quad_stats(direction, spec, xi).z == pytest.approx(z, abs=1e-9)
        assert math.isfinite(log_pair_likelihood(direction, spec, xi))


def test_naive_path_breaks_by_z_six():
    direction = ObservedDirection([1.0, 0.0])
    for z, ok in [(2.0, True), (6.0, False), (10.0, False)]:
        spec = GaussianSpec([0.3 - math.sqrt(2) * z, 0.0], np.eye(2))
        naive = naive_log_pair_likelihood(direction, spec, 0.3)
        stable = log_pair_likelihood(direction, spec, 0.3)
        assert math.isfinite(stable)
        assert math.isfinite(naive) == ok
        if ok:
            assert naive == pytest.approx(stable, rel=1e-10)


# ---------------------------------------------------------------------------
# marginalisation
# ---------------------------------------------------------------------------

def test_marginalize_full_mask_is_identity():
    spec = GaussianSpec([1.0, 2.0], np.array([[2.0, 1.0], [1.0, 2.0]]))
    out = marginalize(spec, [True, True])
    assert np.array_equal(out.mean, spec.mean)
    assert np.array_equal(out.covariance, spec.covariance)


def test_marginalize_principal_submatrix():
    spec = GaussianSpec([1.0, 2.0], np.array([[2.0, 1.0], [1.0, 2.0]]))
    out = marginalize(spec, [True, False])
    assert out.mean.tolist() == [1.0]
    assert out.covariance.tolist() == [[2.0]]


def test_marginalize_all_false_rejected():
    with pytest.raises(EmptyComparisonError):
        marginalize(GaussianSpec([0.0], [[1.0]]), [False])


def test_masked_likelihood_matches_reduced_problem_oracle():
    rng = np.random.default_rng(8)
    cov = spd(rng, 3)
    mean = rng.normal(size=3)
    d = rng.normal(size=3)
    mask = np.array([True, False, True])
    masked = log_pair_likelihood(ObservedDirection(d, mask), GaussianSpec(mean, cov), 0.4)
    reduced_spec = GaussianSpec(mean[mask], cov[np.ix_(mask, mask)])
    ref = quadrature_oracle(ObservedDirection(d[mask]), reduced_spec, 0.4)
    assert math.exp(masked) == pytest.approx(ref, rel=1e-8)
