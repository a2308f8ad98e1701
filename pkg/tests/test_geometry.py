import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oulab.core import gaussian_measure, quadratic_form_R
from oulab.errors import BetaTooSmall, OriginExcluded
from oulab.geometry import (RegionLabel, annulus_complement_mc, annulus_complement_report,
                            annulus_membership, derivative_identities_check,
                            direct_integral_2d, distance_bounds_check, level_tail_mass,
                            make_tube,
                            polar_compose, polar_decompose, polar_density,
                            polar_integral_2d, region_classify, region_is_global,
                            tube_bound_report, tube_gamma_measure)

from conftest import random_stable_model


def test_polar_roundtrip_jordan(jordan):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((1000, 2)) * np.exp(rng.uniform(-3, 3, (1000, 1)))
    pp = polar_decompose(jordan, 1.0, X)
    back = polar_compose(jordan, pp.s, pp.x_tilde)
    assert np.max(np.linalg.norm(back - X, axis=1) / np.linalg.norm(X, axis=1)) <= 1e-9
    assert np.allclose(quadratic_form_R(jordan, pp.x_tilde), 1.0, rtol=1e-10)


@given(st.integers(1, 4), st.integers(0, 10_000), st.floats(0.1, 20))
def test_polar_roundtrip_random(n, seed, beta):
    rng = np.random.default_rng(seed)
    model = random_stable_model(rng, n)
    X = rng.standard_normal((50, n)) * np.exp(rng.uniform(-2, 2, (50, 1)))
    pp = polar_decompose(model, beta, X)
    back = polar_compose(model, pp.s, pp.x_tilde)
    err = np.linalg.norm(back - X, axis=1) / np.linalg.norm(X, axis=1)
    # composing with D_s amplifies rounding by its condition number
    cond = np.array([np.linalg.cond(model.d(s)) for s in pp.s])
    assert np.all(err <= np.maximum(1e-9, 8 * np.finfo(float).eps * cond))


def test_polar_identity_closed_form(identity):
    rng = np.random.default_rng(1)
    X = rng.standard_normal((100, identity.n)) * 3
    beta = 2.0
    pp = polar_decompose(identity, beta, X)
    assert np.allclose(pp.s, 0.5 * np.log(np.sum(X * X, axis=1) / beta), atol=1e-11)


def test_polar_on_level_set(jordan):
    x = np.array([0.3, -1.1])
    beta = float(quadratic_form_R(jordan, x))
    pp = polar_decompose(jordan, beta, x)
    assert abs(pp.s) <= 1e-12
    assert np.allclose(pp.x_tilde, x, rtol=1e-12)


def test_polar_origin(jordan):
    with pytest.raises(OriginExcluded):
        polar_decompose(jordan, 1.0, np.zeros(2))


def test_polar_density_identity():
    from oulab import build_model
    model = build_model(np.eye(2), -np.eye(2))
    xt = np.array([[1.0, 0.0], [0.0, 1.0]])
    for t in (0.0, 0.7):
        assert np.allclose(polar_density(model, xt, t), math.exp(2 * t), rtol=1e-14)


def test_polar_density_at_zero_time(jordan):
    xt = polar_decompose(jordan, 1.0, np.array([[1.0, 2.0]])).x_tilde
    base = polar_density(jordan, xt, 0.0)
    assert np.allclose(polar_density(jordan, xt, 1.3), base * math.exp(-1.3 * jordan.trace_B))


@given(st.integers(0, 10_000))
def test_R_monotone_along_flow(seed):
    rng = np.random.default_rng(seed)
    model = random_stable_model(rng, 3)
    x = rng.standard_normal(3)
    s = np.linspace(-3, 3, 61)
    vals = [quadratic_form_R(model, model.d(v) @ x) for v in s]
    assert np.all(np.diff(vals) > 0)


@pytest.mark.parametrize("phi", [
    lambda P: np.exp(-np.sum(P * P, axis=-1)),
    lambda P: np.exp(-np.sum((P - np.array([1.0, -0.5])) ** 2, axis=-1) / 0.5),
    lambda P: (1 + P[..., 0] ** 2) * np.exp(-0.5 * np.sum(P * P, axis=-1)),
])
def test_polar_integration_matches_direct(jordan, phi):
    a = polar_integral_2d(jordan, phi, beta=1.0, s_range=(-12.0, 12.0))
    b = direct_integral_2d(jordan, phi)
    assert abs(a - b) <= 0.01 * abs(b)


def test_polar_integration_region(jordan):
    phi = lambda P: np.ones(P.shape[:-1])
    a = polar_integral_2d(jordan, phi, beta=1.0, s_range=(-0.5, 0.8))
    b = direct_integral_2d(jordan, phi, beta=1.0, s_range=(-0.5, 0.8))
    assert abs(a - b) <= 1e-3 * b


def test_tube_monotone_in_aperture(jordan):
    rng = np.random.default_rng(3)
    X = rng.standard_normal((4000, 2)) * 4
    prev = None
    for a in (0.1, 0.3, 1.0, 3.0):
        inside = make_tube(jordan, 4.0, [1.0, 0.0], a).contains(jordan, X)
        if prev is not None:
            assert np.all(inside[prev])
        prev = inside


def test_tube_beta_too_small(jordan):
    with pytest.raises(BetaTooSmall):
        tube_gamma_measure(jordan, make_tube(jordan, 1.0, [1.0, 0.0], 0.5))


def test_tube_measure_matches_plain_mc(jordan):
    tube = make_tube(jordan, 4.0, [1.0, 0.5], 1.0)
    est = tube_gamma_measure(jordan, tube, mc_count=100_000, seed=1)
    X = gaussian_measure(jordan).sample(300_000, seed=2)
    p = tube.contains(jordan, X).mean()
    se = math.sqrt(p * (1 - p) / X.shape[0])
    assert abs(est.measure_hat - p) <= 4 * math.hypot(se, est.std_error)


def test_regions():
    x = np.array([[0.0, 0.0], [3.0, 0.0], [3.0, 0.0]])
    u = np.array([[0.0, 0.0], [3.2, 0.0], [3.3, 0.0]])
    assert region_classify(x[0], u[0]) is RegionLabel.LOCAL
    assert list(region_is_global(x, u)) == [False, False, True]
    # the boundary |x - u| = 1/(1+|x|) is local
    assert not region_is_global(np.array([1.0, 0.0]), np.array([1.5, 0.0]))


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_regions_partition(c):
    x, u = np.array(c[:2]), np.array(c[2:])
    g = bool(region_is_global(x, u))
    assert (region_classify(x, u) is RegionLabel.GLOBAL) == g


def test_annulus_membership(jordan):
    alpha = 1e3
    x = polar_decompose(jordan, math.log(alpha), np.array([[1.0, 1.0]])).x_tilde
    assert annulus_membership(jordan, alpha, x)[0]
    assert not annulus_membership(jordan, alpha, 0.1 * x)[0]
    with pytest.raises(ValueError):
        annulus_membership(jordan, 2.0, x)


def test_annulus_tail(jordan):
    assert annulus_complement_report(jordan).passed
    # in 2-d, 2R is chi-square with 2 degrees, so gamma{R > r} = e^{-r}
    alphas = np.array([1e2, 1e3, 1e4])
    exact = np.exp(-2 * np.log(alphas))
    assert np.allclose(level_tail_mass(2, 2 * np.log(alphas)), exact, rtol=1e-12)
    assert np.all(alphas * exact <= 1.0)
    est = annulus_complement_mc(jordan, 1e2, count=1_000_000, seed=0)
    assert abs(est.measure_hat - 1e-4) <= 4 * est.std_error


def test_derivative_identities(jordan):
    checks = derivative_identities_check(jordan, count=1000)
    assert all(c.passed for c in checks), [c.claim_id for c in checks if not c.passed]


@given(st.integers(2, 4), st.integers(0, 1000))
def test_derivative_identities_random(n, seed):
    model = random_stable_model(np.random.default_rng(seed), n)
    for c in derivative_identities_check(model, count=200, seed=seed):
        if hasattr(c, "tol"):
            assert c.passed, c.claim_id


def test_distance_and_tube_reports(jordan):
    reports = distance_bounds_check(jordan, 4.0, count=5000)
    reports.append(tube_bound_report(jordan, mc_count=100_000)[0])
    assert all(r.passed for r in reports), [r.claim_id for r in reports if not r.passed]
