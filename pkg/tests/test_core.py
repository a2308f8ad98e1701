import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import assume, given, strategies as st
from scipy.integrate import quad_vec

from oulab import build_model
from oulab.core import (check_matrix_estimates, covariance_qt, drift_dt, gaussian_measure,
                        grad_R, lyapunov_residual_of, matrix_family, quadratic_form_R)
from oulab.errors import (DriftNotStable, NegativeTimeUnsupportedRoute, NotPositiveDefinite,
                          NotSymmetric, TimeNonpositive)
from oulab.reports import fitted_decay_rate

from conftest import JORDAN_B, JORDAN_Q_INF, random_stable_model


def test_scalar_q_inf(scalar):
    assert abs(scalar.Q_inf[0, 0] - 0.5) <= 1e-15


def test_identity_q_inf(identity):
    assert np.max(np.abs(identity.Q_inf - 0.5 * np.eye(identity.n))) <= 1e-15


def test_jordan_q_inf(jordan):
    assert np.max(np.abs(jordan.Q_inf - JORDAN_Q_INF)) <= 1e-14
    assert np.allclose(jordan.Q_inf_inv, [[1.6, -0.8], [-0.8, 2.4]], rtol=1e-14)


@pytest.mark.parametrize("Q, B, err", [
    ([[1.0, 0.1], [0.0, 1.0]], -np.eye(2), NotSymmetric),
    ([[1.0, 2.0], [2.0, 1.0]], -np.eye(2), NotPositiveDefinite),
    (np.eye(2), [[0.0, 1.0], [-1.0, 0.0]], DriftNotStable),
    (np.eye(2), [[-1.0, 0.0], [0.0, 1e-3]], DriftNotStable),
])
def test_build_model_errors(Q, B, err):
    with pytest.raises(err):
        build_model(Q, B)


def test_model_arrays_are_read_only(jordan):
    with pytest.raises(ValueError):
        jordan.Q_inf[0, 0] = 1.0


def test_scalar_qt(scalar):
    assert abs(covariance_qt(scalar, 1.0)[0, 0] - (1 - math.exp(-2)) / 2) <= 1e-15
    assert covariance_qt(scalar, math.inf) is scalar.Q_inf


def test_identity_qt(identity):
    for t in (1e-3, 0.3, 1.0, 7.0):
        ref = (1 - math.exp(-2 * t)) / 2 * np.eye(identity.n)
        assert np.max(np.abs(covariance_qt(identity, t) - ref)) <= 1e-10 * ref[0, 0]


def test_jordan_qt_by_quadrature(jordan):
    def integrand(s):
        E = scipy.linalg.expm(s * JORDAN_B)
        return E @ E.T
    ref, _ = quad_vec(integrand, 0.0, 0.5, epsabs=1e-14, epsrel=1e-12)
    assert np.max(np.abs(covariance_qt(jordan, 0.5) - ref)) <= 1e-8


def test_qt_time_errors(jordan):
    with pytest.raises(TimeNonpositive):
        covariance_qt(jordan, 0.0)
    with pytest.raises(NotPositiveDefinite):
        covariance_qt(jordan, 1e-12)


def test_drift_identity_model(identity):
    for t in (-2.0, 0.5, 3.0):
        assert np.allclose(drift_dt(identity, t), math.exp(t) * np.eye(identity.n), rtol=1e-13)


def test_drift_at_zero(jordan):
    assert np.allclose(drift_dt(jordan, 0.0, "lemma_i"), np.eye(2), atol=1e-15)
    for route in ("definition", "lemma_ii"):
        with pytest.raises(NegativeTimeUnsupportedRoute):
            drift_dt(jordan, 0.0, route)
        with pytest.raises(NegativeTimeUnsupportedRoute):
            drift_dt(jordan, -1.0, route)


def test_drift_routes_jordan(jordan):
    D = {r: drift_dt(jordan, 1.0, r) for r in ("definition", "lemma_i", "lemma_ii")}
    for r in D:
        assert np.max(np.abs(D[r] - D["lemma_i"])) <= 1e-9 * np.max(np.abs(D["lemma_i"]))
    assert np.allclose(D["lemma_i"] @ D["lemma_i"], drift_dt(jordan, 2.0), rtol=1e-12)


def _route_errors(model, t):
    ref = drift_dt(model, t, "lemma_i")
    return [np.max(np.abs(drift_dt(model, t, r) - ref)) / np.max(np.abs(ref))
            for r in ("definition", "lemma_ii")]


def test_drift_routes_agree_on_grid(jordan, identity):
    for model in (jordan, identity):
        for t in np.geomspace(1e-3, 20, 41):
            assert max(_route_errors(model, t)) <= 1e-9


@given(st.integers(1, 4), st.integers(0, 10_000),
       st.floats(math.log(1e-3), math.log(20.0)))
def test_drift_routes_agree(n, seed, logt):
    model = random_stable_model(np.random.default_rng(seed), n)
    t = math.exp(logt)
    # the defining formula solves with the precision gap; its accuracy is
    # rounding times the gap's condition number
    assume(np.linalg.cond(model.precision_gap(t)) <= 1e5)
    assert max(_route_errors(model, t)) <= 1e-9


@given(st.integers(1, 4), st.integers(0, 10_000), st.floats(1e-3, 20))
def test_lemma_ii_route_always_accurate(n, seed, t):
    model = random_stable_model(np.random.default_rng(seed), n)
    assume(t > 1e-3)
    ref = drift_dt(model, t, "lemma_i")
    D = drift_dt(model, t, "lemma_ii")
    assert np.max(np.abs(D - ref)) <= 1e-9 * np.max(np.abs(ref))


@given(st.integers(1, 4), st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_drift_group_law(n, seed, s, t):
    model = random_stable_model(np.random.default_rng(seed), n)
    lhs = drift_dt(model, s) @ drift_dt(model, t)
    ref = drift_dt(model, s + t)
    assert np.max(np.abs(lhs - ref)) <= 1e-9 * np.max(np.abs(ref))


@given(st.integers(1, 4), st.integers(0, 10_000), st.floats(0.01, 5), st.floats(0.01, 5))
def test_qt_semigroup_identity(n, seed, t, s):
    model = random_stable_model(np.random.default_rng(seed), n)
    E = model.expm(t)
    lhs = covariance_qt(model, t + s)
    rhs = covariance_qt(model, t) + E @ covariance_qt(model, s) @ E.T
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * np.max(np.abs(lhs))


@given(st.integers(1, 4), st.integers(0, 10_000))
def test_lyapunov_residual_random(n, seed):
    assert lyapunov_residual_of(random_stable_model(np.random.default_rng(seed), n)) <= 1e-10


def test_R_values(identity, jordan):
    x = np.random.default_rng(0).standard_normal((5, identity.n))
    assert np.allclose(quadratic_form_R(identity, x), np.sum(x * x, axis=1), rtol=1e-14)
    assert quadratic_form_R(jordan, np.zeros(2)) == 0.0
    assert abs(quadratic_form_R(jordan, [1.0, 0.0]) - 0.8) <= 1e-14


@given(st.integers(0, 10_000))
def test_grad_R_finite_difference(seed):
    rng = np.random.default_rng(seed)
    model = random_stable_model(rng, 3)
    x = rng.standard_normal(3)
    h = 1e-6
    fd = np.array([(quadratic_form_R(model, x + h * e) - quadratic_form_R(model, x - h * e))
                   / (2 * h) for e in np.eye(3)])
    assert np.allclose(grad_R(model, x), fd, rtol=1e-6, atol=1e-8)


def test_qt_decay_is_log_linear(jordan):
    t = np.linspace(5.0, 20.0, 31)
    gaps = [np.linalg.norm(jordan.Q_inf - covariance_qt(jordan, s)) for s in t]
    c, r2 = fitted_decay_rate(t, gaps)
    assert c > 0 and r2 >= 0.99


def test_gaussian_density_at_zero(identity):
    g = gaussian_measure(identity)
    assert abs(g.density(np.zeros(identity.n)) - math.pi ** (-identity.n / 2)) <= 1e-14


def test_gaussian_sample_moments(jordan):
    g = gaussian_measure(jordan, 0.7)
    X = g.sample(200_000, seed=3)
    C = g.covariance
    se = np.sqrt((np.outer(np.diag(C), np.diag(C)) + C ** 2) / X.shape[0])
    assert np.all(np.abs(np.cov(X.T) - covariance_qt(jordan, 0.7)) <= 4 * se)


def test_matrix_family_matches_scalar_calls(jordan):
    t = np.array([0.01, 0.5, 3.0])
    fam = matrix_family(jordan, t)
    for k, s in enumerate(t):
        assert np.allclose(fam.Qt[k], jordan.qt(s), rtol=1e-12)
        assert np.allclose(fam.D[k], jordan.d(s), rtol=1e-12)
        assert np.allclose(fam.gap[k], jordan.precision_gap(s), rtol=1e-10)


def test_precision_gap_no_cancellation(jordan):
    # at large t the gap is tiny but must stay positive definite
    G = jordan.precision_gap(30.0)
    assert np.all(np.linalg.eigvalsh(G) > 0)


def test_matrix_estimates_pass_jordan(jordan):
    reports = check_matrix_estimates(jordan)
    assert reports and all(r.passed for r in reports), [r.claim_id for r in reports if not r.passed]


def test_det_ratio_limits(jordan):
    # det Q_t / min(1, t)^n tends to det Q as t -> 0 and to det Q_inf as t -> inf
    assert abs(np.linalg.det(covariance_qt(jordan, 1e-6)) / 1e-12 - 1.0) <= 1e-4
    assert abs(np.linalg.det(covariance_qt(jordan, 40.0)) - 5 / 16) <= 1e-12
    rep = next(r for r in check_matrix_estimates(jordan) if r.claim_id.startswith("qt-det"))
    assert 5 / 16 * (1 - 1e-6) >= rep.min_ratio > 0 and rep.max_ratio <= 1 + 1e-6
