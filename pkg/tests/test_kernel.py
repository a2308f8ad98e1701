import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oulab.core import gaussian_measure
from oulab.errors import DimensionTooLargeForQuadrature, TimeNonpositive
from oulab.kernel import (Polynomial, SampleSpec, apply_semigroup,
                          check_global_small_t_bound, check_kernel_bounds_large_t,
                          check_kernel_bounds_small_t, dirac_approx, gaussian_bump,
                          indicator_ball, log_gaussian_semigroup, mehler_log_kernel,
                          semigroup_law_check)

from conftest import random_stable_model

QUAD_ROUTES = ("kolmogorov_quadrature", "kernel_gamma_quadrature")


def classical_mehler_log(t, x, u):
    """Log of the 1-d Mehler kernel against N(0, 1/2), product over coordinates."""
    r = math.exp(-t)
    q = 1 - r * r
    return np.sum(-0.5 * math.log(q) + (2 * r * x * u - r * r * (x * x + u * u)) / q, axis=-1)


def test_mehler_scalar_at_log2(scalar):
    k = mehler_log_kernel(scalar, math.log(2), np.zeros(1), np.zeros(1))
    assert abs(k.value - math.sqrt(4 / 3)) <= 1e-14


@given(st.floats(1e-3, 20), st.lists(st.floats(-4, 4), min_size=6, max_size=6))
def test_mehler_identity_models(t, coords):
    for n in (1, 2, 3):
        from oulab import build_model
        model = build_model(np.eye(n), -np.eye(n))
        x = np.array(coords[:n])
        u = np.array(coords[3:3 + n])
        k = mehler_log_kernel(model, t, x, u)
        assert abs(k.log_value - classical_mehler_log(t, x, u)) <= 1e-9 * max(1.0, abs(k.log_value))


@given(st.integers(1, 4), st.integers(0, 10_000))
def test_kernel_decomposition(n, seed):
    rng = np.random.default_rng(seed)
    model = random_stable_model(rng, n)
    t = np.exp(rng.uniform(-6, 3, 50))
    x = rng.standard_normal((50, n)) * 3
    u = rng.standard_normal((50, n)) * 3
    k = mehler_log_kernel(model, t, x, u)
    assert np.allclose(k.log_value, k.log_det_ratio + k.R_x + k.quad_term, rtol=1e-12, atol=1e-12)
    assert np.all(k.quad_term <= 0)
    D = np.stack([model.d(s) for s in t])
    # u = D_t x is only representable to rounding when D_t is moderate
    ok = np.linalg.norm(D, axis=(1, 2)) <= 1e4
    at_min = mehler_log_kernel(model, t[ok], x[ok], np.einsum("kij,kj->ki", D[ok], x[ok]))
    assert np.all(np.abs(at_min.quad_term) <= 1e-8 * (1 + at_min.R_x))


def test_kernel_stiff_large_t():
    from oulab import build_model
    model = build_model(np.eye(2), np.diag([-0.05, -3.0]))
    x = np.array([[1.0, 2.0], [-0.5, 0.3]])
    u = np.array([[0.2, -1.0], [1.5, 0.0]])
    for t in (5.0, 20.0, 50.0):
        k = mehler_log_kernel(model, t, x, u)
        assert np.all(k.quad_term <= 0) and np.all(np.isfinite(k.log_value))
        # diagonal model: product of scalar Mehler kernels with rates 0.05 and 3
        ref = 0.0
        for i, b in enumerate((0.05, 3.0)):
            r = math.exp(-b * t)
            qi = 1 / (2 * b)
            ref += (-0.5 * math.log(1 - r * r)
                    + (2 * r * x[:, i] * u[:, i] - r * r * (x[:, i] ** 2 + u[:, i] ** 2))
                    / (2 * qi * (1 - r * r)))
        assert np.allclose(k.log_value, ref, rtol=1e-9, atol=1e-12)


def test_kernel_large_t_finite(jordan):
    x = np.random.default_rng(0).standard_normal((100, 2)) * 5
    k = mehler_log_kernel(jordan, 50.0, x, x[::-1])
    assert np.all(np.isfinite(k.log_value))


def test_kernel_rejects_nonpositive_t(jordan):
    with pytest.raises(TimeNonpositive):
        mehler_log_kernel(jordan, 0.0, np.zeros(2), np.zeros(2))
    with pytest.raises(TimeNonpositive):
        apply_semigroup(jordan, -1.0, Polynomial.constant(1.0, 2), np.zeros(2))


@pytest.mark.parametrize("route", QUAD_ROUTES)
def test_conservation(jordan, route):
    one = Polynomial.constant(1.0, 2)
    x = np.array([[0.0, 0.0], [1.0, -2.0], [3.0, 3.0]])
    for t in np.geomspace(1e-3, 20, 9):
        val = apply_semigroup(jordan, t, one, x, route=route).value
        assert np.max(np.abs(val - 1)) <= 1e-8


def test_conservation_monte_carlo(jordan):
    one = Polynomial.constant(1.0, 2)
    assert np.all(apply_semigroup(jordan, 0.5, one, np.ones((2, 2)), route="monte_carlo",
                                  count=1000).value == 1.0)


def test_linear_function(identity):
    n = identity.n
    f = Polynomial({tuple(int(i == 0) for i in range(n)): 1.0})
    x = np.random.default_rng(1).standard_normal((4, n))
    for t in (0.1, 1.0, 5.0):
        for route in QUAD_ROUTES:
            val = apply_semigroup(identity, t, f, x, route=route).value
            assert np.allclose(val, math.exp(-t) * x[:, 0], rtol=1e-8, atol=1e-12)


def test_routes_gaussian_bump_jordan(jordan):
    f = gaussian_bump([0.5, -0.3], 0.4)
    x = np.array([1.0, 1.0])
    vals = {r: apply_semigroup(jordan, 0.7, f, x, route=r, count=400_000)
            for r in ("kolmogorov_quadrature", "kernel_gamma_quadrature", "monte_carlo",
                      "gaussian_closed_form")}
    ref = vals["gaussian_closed_form"].value
    for r in QUAD_ROUTES:
        assert abs(vals[r].value - ref) <= 1e-6 * ref
    mc = vals["monte_carlo"]
    assert abs(mc.value - ref) <= max(1e-3 * ref, 4 * mc.error)


@given(st.integers(0, 10_000))
def test_log_gaussian_semigroup_routes(seed):
    rng = np.random.default_rng(seed)
    model = random_stable_model(rng, 2)
    f = gaussian_bump(rng.standard_normal(2), rng.uniform(0.05, 2.0))
    t = np.exp(rng.uniform(-5, 3, 20))
    x = rng.standard_normal((20, 2)) * 2
    a = log_gaussian_semigroup(model, f, t, x, route="kernel")
    b = log_gaussian_semigroup(model, f, t, x, route="kolmogorov")
    assert np.allclose(a, b, rtol=1e-8, atol=1e-8)


def test_log_gaussian_semigroup_matches_quadrature(jordan):
    f = gaussian_bump([0.3, 0.2], 0.5, scale=2.0)
    x = np.array([[0.0, 0.0], [1.5, -0.5]])
    for t in (0.05, 1.0, 6.0):
        q = apply_semigroup(jordan, t, f, x).value
        assert np.allclose(np.exp(log_gaussian_semigroup(jordan, f, t, x)), q, rtol=1e-7)


def test_indicator_ball_routes(jordan):
    f = indicator_ball([0.2, 0.1], 0.6)
    x = np.array([0.5, -0.5])
    for t in (0.1, 1.0):
        a = apply_semigroup(jordan, t, f, x, route="kolmogorov_quadrature").value
        b = apply_semigroup(jordan, t, f, x, route="kernel_gamma_quadrature").value
        mc = apply_semigroup(jordan, t, f, x, route="monte_carlo", count=400_000)
        assert abs(a - b) <= 1e-6 * a
        assert abs(mc.value - a) <= max(1e-3 * a, 4 * mc.error)


def test_polynomial_routes(jordan):
    f = Polynomial({(2, 0): 1.0, (1, 1): -0.5, (0, 3): 0.25, (0, 0): 1.0})
    x = np.array([[0.4, -1.2]])
    for t in (0.1, 1.0, 5.0):
        a = apply_semigroup(jordan, t, f, x, route="kolmogorov_quadrature").value
        b = apply_semigroup(jordan, t, f, x, route="kernel_gamma_quadrature").value
        assert np.allclose(a, b, rtol=1e-8)


def test_polynomial_degree_limit():
    with pytest.raises(ValueError):
        Polynomial({(5, 0): 1.0})


def test_dimension_limit():
    from oulab import build_model
    model = build_model(np.eye(5), -np.eye(5))
    with pytest.raises(DimensionTooLargeForQuadrature):
        apply_semigroup(model, 1.0, Polynomial.constant(1.0, 5), np.zeros(5))


@pytest.mark.parametrize("width", [0.2, 0.05, 0.01])
def test_dirac_approx_normalized(jordan, width):
    f = dirac_approx(jordan, [1.0, -0.5], width)
    assert abs(f.l1_norm(jordan) - 1.0) <= 0.01


def test_dirac_approx_l1_by_sampling(jordan):
    f = dirac_approx(jordan, [0.3, 0.3], 0.3)
    X = gaussian_measure(jordan).sample(400_000, seed=5)
    v = f(X)
    assert abs(v.mean() - 1.0) <= 4 * v.std() / math.sqrt(v.size)


def test_invariance(jordan):
    f = gaussian_bump([0.5, 0.5], 0.3)
    X = gaussian_measure(jordan).sample(200_000, seed=11)
    for t in (0.1, 1.0, 5.0):
        h = np.exp(log_gaussian_semigroup(jordan, f, t, X))
        assert abs(h.mean() - f.l1_norm(jordan)) <= 4 * h.std() / math.sqrt(h.size)


def test_semigroup_law(jordan):
    f = gaussian_bump([0.3, -0.2], 0.6)
    x = np.array([[0.0, 0.0], [0.8, 0.4]])
    _, _, err = semigroup_law_check(jordan, f, 0.4, 0.6, x)
    assert np.max(err) <= 1e-4


def test_kernel_at_flow_point_small_t(jordan):
    # at u = D_t x only the prefactor remains: log K + (n/2) log t - R(x) stays bounded
    rng = np.random.default_rng(2)
    x = rng.standard_normal((200, 2))
    t = np.exp(rng.uniform(math.log(1e-6), 0, 200))
    u = np.einsum("kij,kj->ki", np.stack([jordan.d(s) for s in t]), x)
    k = mehler_log_kernel(jordan, t, x, u)
    rest = k.log_value + np.log(t) - k.R_x
    assert np.all(np.isfinite(rest)) and np.ptp(rest) < 2.0


def test_bound_checkers_scalar(scalar):
    spec = SampleSpec(count=4000, seed=1)
    reports = (check_kernel_bounds_small_t(scalar, spec)
               + check_kernel_bounds_large_t(scalar, spec.with_(t_range=(1.0, 20.0)))
               + check_global_small_t_bound(scalar, 1e3, spec))
    assert all(r.passed for r in reports), [r.claim_id for r in reports if not r.passed]


def test_small_t_exponent_constants_scalar(scalar):
    # in 1-d the exponent ratio is t (1/Q_t - 1/Q_inf) / 2 = t / (e^{2t} - 1),
    # which decreases from 1/2 at t -> 0 to 1/(e^2 - 1) at t = 1
    rep = check_kernel_bounds_small_t(scalar, SampleSpec(count=2000, seed=0))[0]
    assert rep.claim_id.startswith("kernel-small-t:exponent")
    assert 1 / (math.e ** 2 - 1) * (1 - 1e-9) <= rep.min_ratio
    assert rep.max_ratio <= 0.5 * (1 + 1e-9)
    assert rep.max_ratio >= 0.49 and rep.min_ratio <= 0.16
