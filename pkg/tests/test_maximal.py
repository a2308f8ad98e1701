import math

import numpy as np
import pytest
from scipy import optimize, stats

from oulab.core import gaussian_measure, quadratic_form_R
from oulab.errors import SampleBudgetTooSmall
from oulab.kernel import Polynomial, dirac_approx, gaussian_bump, log_gaussian_semigroup
from oulab.maximal import (PLAIN, Proposal, TimeGrid, check_zone_run, default_proposal,
                           forbidden_zone_construct, gaussian_ball_probability,
                           growth_slope, in_shell, large_t_family, large_t_refinement_scan,
                           level_point, level_set_measure, maximal_function,
                           sharpness_experiment, sharpness_scan, shell_index,
                           weaktype_family, weaktype_scan, weaktype_width)


def scalar_heat(t, x, c, w):
    """``H_t f(x)`` in the scalar model (Q = 1, B = -1) for the L1-normalized
    Gaussian bump of centre ``c`` and width ``w``, from first principles."""
    qinf = 0.5
    amp = math.sqrt(w * w + qinf) / w * math.exp(c * c / (2 * (w * w + qinf)))
    qt = 0.5 * (1 - np.exp(-2 * t))
    s2 = w * w + qt
    return amp * w / np.sqrt(s2) * np.exp(-(c - np.exp(-t) * x) ** 2 / (2 * s2))


def test_scalar_oracle_matches_closed_form(scalar):
    f = dirac_approx(scalar, [1.3], 0.2)
    t = np.array([0.01, 0.5, 3.0])
    x = np.array([[0.4], [-1.0], [2.0]])
    got = np.exp(log_gaussian_semigroup(scalar, f, t, x))
    assert np.allclose(got, scalar_heat(t, x[:, 0], 1.3, 0.2), rtol=1e-12)


def test_maximal_of_constant(jordan):
    one = Polynomial.constant(1.0, 2)
    res = maximal_function(jordan, one, np.array([[0.0, 0.0], [2.0, -1.0]]),
                           grid=TimeGrid(per_decade=4, refine_rounds=1))
    assert np.allclose(res.sup_value, 1.0, atol=1e-10)


def test_maximal_argmax_scalar(scalar):
    x, c, w = 1.0, math.exp(0.5), 0.05
    f = dirac_approx(scalar, [c], w)
    res = maximal_function(scalar, f, np.array([x]))
    opt = optimize.minimize_scalar(lambda lt: -math.log(scalar_heat(math.exp(lt), x, c, w)),
                                   bounds=(math.log(1e-3), math.log(20)), method="bounded",
                                   options={"xatol": 1e-12})
    t_star = math.exp(opt.x)
    assert abs(res.sup_value - scalar_heat(t_star, x, c, w)) <= 1e-6 * res.sup_value
    assert abs(res.argmax_t - t_star) <= 1e-2 * t_star


def test_refinement_monotone(jordan):
    f = dirac_approx(jordan, [1.0, -0.5], 0.05)
    X = np.random.default_rng(0).standard_normal((200, 2))
    res = maximal_function(jordan, f, X)
    assert np.all(res.log_sup >= res.coarse_log_sup - 1e-9)
    # the cross-check evaluates the other closed form at the argmax
    assert np.allclose(res.cross_check["kolmogorov_closed_form"], res.sup_value, rtol=1e-7)


def test_variants_split(jordan):
    f = dirac_approx(jordan, [0.5, 0.5], 0.1)
    X = np.random.default_rng(1).standard_normal((60, 2)) * 1.5
    # each variant refines around its own argmax, so the bounds hold up to grid error
    grid = TimeGrid()
    full = maximal_function(jordan, f, X, grid=grid).sup_value
    loc = maximal_function(jordan, f, X, grid=grid, variant="local").sup_value
    glob = maximal_function(jordan, f, X, grid=grid, variant="global").sup_value
    big = maximal_function(jordan, f, X, grid=grid, variant="large_t").sup_value
    assert np.all(loc <= full * (1 + 1e-5)) and np.all(glob <= full * (1 + 1e-5))
    assert np.all(full <= (loc + glob) * (1 + 1e-5))
    assert np.all(big <= full * (1 + 1e-5))


def test_gaussian_ball_probability_mc():
    rng = np.random.default_rng(2)
    mean = np.array([0.3, -0.2])
    P = np.array([[4.0, 1.0], [1.0, 2.0]])
    center, radius = np.array([0.5, 0.0]), 0.4
    p = gaussian_ball_probability(mean[None], P[None], center[None], radius)[0]
    U = mean + rng.standard_normal((1_000_000, 2)) @ np.linalg.cholesky(np.linalg.inv(P)).T
    q = np.mean(np.linalg.norm(U - center, axis=1) <= radius)
    assert abs(p - q) <= 4 * math.sqrt(q * (1 - q) / U.shape[0])


def test_gaussian_ball_probability_1d():
    p = gaussian_ball_probability(np.array([[0.2]]), np.array([[[4.0]]]),
                                  np.array([[0.0]]), 0.5)[0]
    ref = stats.norm.cdf(0.5, 0.2, 0.5) - stats.norm.cdf(-0.5, 0.2, 0.5)
    assert abs(p - ref) <= 1e-10


def test_proposal_weights_unbiased(jordan):
    prop = Proposal(gamma_weight=0.2, shells=((3.0, 0.4),),
                    gaussians=(((1.0, 1.0), 0.5, 0.4),))
    rng = np.random.default_rng(3)
    X = prop.sample(jordan, 400_000, rng)
    w = np.exp(prop.log_weight(jordan, X))
    assert abs(w.mean() - 1) <= 4 * w.std() / math.sqrt(w.size)
    assert w.max() <= 1 / 0.2 * (1 + 1e-12)
    assert np.all(PLAIN.log_weight(jordan, X) == 0)
    with pytest.raises(ValueError):
        Proposal(gamma_weight=0.5)


def test_level_set_bounded_function_is_empty(jordan):
    f = gaussian_bump([0.0, 0.0], 1.0, scale=5.0)
    est = level_set_measure(jordan, f, 10.0, evaluator=0.5)
    assert est.measure_hat == 0.0 and est.std_error == 0.0
    one = Polynomial.constant(1.0, 2)
    assert weaktype_scan(jordan, [one], alpha_grid=(2.0, 10.0), mc_budget=1000).max_statistic == 0


def test_level_set_fixed_t_scalar_oracle(scalar):
    c, w, t, alpha = 0.8, 0.02, 0.01, 5.0
    f = dirac_approx(scalar, [c], w)
    # {x : H_t f(x) > alpha} is an interval around e^t c
    qinf = 0.5
    amp = math.sqrt(w * w + qinf) / w * math.exp(c * c / (2 * (w * w + qinf)))
    s2 = w * w + 0.5 * (1 - math.exp(-2 * t))
    half = math.sqrt(2 * s2 * math.log(amp * w / (math.sqrt(s2) * alpha)))
    r = math.exp(-t)
    lo, hi = (c - half) / r, (c + half) / r
    sd = math.sqrt(qinf)
    exact = stats.norm.cdf(hi, 0, sd) - stats.norm.cdf(lo, 0, sd)
    for proposal in ("plain", None):
        est = level_set_measure(scalar, f, alpha, evaluator=t, mc_count=200_000, seed=4,
                                proposal=proposal)
        assert abs(est.measure_hat - exact) <= 4 * est.std_error


def test_weaktype_scalar_oracle(scalar):
    alpha, c = 10.0, 0.5
    f = dirac_approx(scalar, [c], weaktype_width(scalar, np.array([c]), alpha))
    xs = np.linspace(-4, 4, 16001)
    sup = maximal_function(scalar, f, xs[:, None]).sup_value
    dens = np.exp(gaussian_measure(scalar).log_density(xs[:, None]))
    exact = np.trapezoid(np.where(sup > alpha, dens, 0.0), xs)
    est = level_set_measure(scalar, f, alpha, "full", mc_count=50_000, seed=5)
    assert abs(est.measure_hat - exact) <= 4 * est.std_error + 2 * (xs[1] - xs[0]) * dens.max()


def test_level_set_monotone_in_alpha(jordan):
    f = dirac_approx(jordan, [1.0, 0.0], 0.05)
    prop = default_proposal(jordan, f, 20.0, t=0.02)
    vals = [level_set_measure(jordan, f, a, evaluator=0.02, mc_count=50_000, seed=6,
                              proposal=prop).measure_hat for a in (5.0, 10.0, 20.0, 40.0)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_sample_budget_too_small(jordan):
    f = dirac_approx(jordan, [1.0, 0.0], 0.01)
    with pytest.raises(SampleBudgetTooSmall):
        level_set_measure(jordan, f, 1e4, evaluator=0.5, mc_count=100, proposal="plain")


def test_growth_slope():
    a = np.array([1e2, 1e3, 1e4])
    b, sb = growth_slope(a, 3 * a ** 0.25, 0.01 * a ** 0.25)
    assert abs(b - 0.25) <= 1e-12 and sb > 0
    assert growth_slope(a, [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]) == (0.0, 0.0)


def test_weaktype_family_normalized(jordan):
    fam = weaktype_family(jordan)(1e3)
    assert len(fam) == 3
    assert all(abs(f.l1_norm(jordan) - 1) <= 0.01 for f in fam)


def test_weaktype_scan_small_budget(jordan):
    rep = weaktype_scan(jordan, alpha_grid=(1e2, 1e3), mc_budget=20_000, seed=1)
    assert rep.passed, rep.table()
    assert {r["alpha"] for r in rep.rows} == {1e2, 1e3}


def test_large_t_scan_small_budget(jordan):
    rep = large_t_refinement_scan(jordan, alpha_grid=(1e2, 1e3), mc_budget=20_000)
    assert rep.passed, rep.table()
    with pytest.raises(ValueError):
        large_t_refinement_scan(jordan, alpha_grid=(5.0, 1e2))


def test_large_t_family_points(jordan):
    fam = large_t_family(jordan)(1e3)
    z = level_point(jordan, math.log(1e3), [1.0, 0.0])
    assert abs(quadratic_form_R(jordan, z) - math.log(1e3)) <= 1e-12
    assert np.allclose(fam[0].gaussian_factor[0], jordan.d(1.5) @ z)


def test_sharpness_nonempty_and_scalar(scalar, jordan):
    res = sharpness_experiment(jordan, 2.0, 1e3, mc_count=50_000, seed=2)
    assert res.measure_hat > 0 and abs(res.ratio - 1) <= 0.1
    rep = sharpness_scan(scalar, alpha_grid=(1e2, 1e3, 1e4), mc_count=50_000)
    assert rep.passed, rep.table()
    with pytest.raises(ValueError):
        sharpness_experiment(jordan, 0.5, 1e3)


def test_shell_index(jordan):
    x = np.array([[2.0, 0.0]] * 4)
    t = 0.25
    y = x[0] @ jordan.d(t).T
    u = y + np.array([[0.3, 0.0], [0.5, 0.0], [0.9, 0.0], [1.5, 0.0]])
    m = shell_index(jordan, t, x, u)
    assert list(m) == [0, 0, 1, 2]
    for k in range(3):
        assert np.all(in_shell(jordan, t, x, u, k) == (m == k))
    assert shell_index(jordan, t, x[:1], x[:1])[0] == -1


def test_zones_empty_run(jordan):
    run = forbidden_zone_construct(jordan, [(np.array([1e3, 0.0]), 1.0)], 1e2)
    assert run.zone_count == 0 and run.level_set_size == 0 and run.passed


def test_zones_single_mass_scalar(scalar):
    z = level_point(scalar, math.log(1e2) + 1, [1.0])
    run = forbidden_zone_construct(scalar, [(z, 1.0)], 1e2, grid_step=0.002)
    assert run.level_set_size > 0 and run.zone_count == 1 and run.passed


@pytest.mark.parametrize("m", [0, 1])
def test_zones_two_masses_jordan(jordan, m):
    la = math.log(1e2)
    masses = [(level_point(jordan, la + 1, [1.0, 0.0]), 0.5),
              (level_point(jordan, la + 1, [-0.3, 1.0]), 0.5)]
    run = forbidden_zone_construct(jordan, masses, 1e2, m=m)
    assert run.terminated and run.zone_count < 1000 and run.passed, run.checks


def test_zone_checker_detects_overlap(jordan):
    la = math.log(1e2)
    masses = [(level_point(jordan, la + 1, [1.0, 0.0]), 0.5),
              (level_point(jordan, la + 1, [-0.3, 1.0]), 0.5)]
    run = forbidden_zone_construct(jordan, masses, 1e2)
    if run.zone_count:
        run.points = np.concatenate([run.points, run.points[:1]])
        run.times = np.concatenate([run.times, run.times[:1]])
        run.tubes = run.tubes + run.tubes[:1]
        run.ball_centers = np.concatenate([run.ball_centers, run.ball_centers[:1]])
        run.ball_radii = np.concatenate([run.ball_radii, run.ball_radii[:1]])
        assert not check_zone_run(jordan, run, run.points)["balls_disjoint"]
