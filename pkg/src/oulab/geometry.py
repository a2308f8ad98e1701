"""Adapted polar coordinates ``x = D_s x_tilde`` with ``R(x_tilde) = beta``,
tubes, distance estimates and the region/annulus decompositions.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import quadratic_form_R
from .errors import BetaTooSmall, BracketNotFound, OriginExcluded
from .linalg import matrix_exp
from .reports import LOWER, TWO_SIDED, UPPER, assess_ratios, identity_check

MAX_ABS_S = 1e3
S_TOL = 1e-12
BETA_MIN = 4.0
IDENTITY_TOL = 1e-9


# -- polar coordinates -------------------------------------------------------------

@dataclass(frozen=True)
class PolarPoint:
    """``x = D_s x_tilde`` with ``x_tilde`` on ``E_beta``; arrays are batched
    over the leading axes of ``x``."""

    beta: float
    s: np.ndarray
    x_tilde: np.ndarray
    x: np.ndarray


def _d_batch(model, s):
    """``D_s`` for an array of times (uncached)."""
    return model.Q_inf @ matrix_exp(model.B.T, -np.asarray(s, dtype=float)) @ model.Q_inf_inv


def _apply(M, x):
    return np.einsum("...ij,...j->...i", M, x)


def speed(model, y):
    """``|Q^{1/2} Q_inf^{-1} y|^2 / 2``, the growth rate of ``R`` along the flow."""
    z = np.asarray(y, dtype=float) @ model.Q_inf_inv
    return 0.5 * np.einsum("...i,ij,...j->...", z, model.Q, z)


def polar_decompose(model, beta, x):
    """Solve ``R(D_{-s} x) = beta`` for ``s`` and return ``(s, D_{-s} x)``.

    The map ``s -> log R(D_{-s} x)`` is strictly decreasing, so after an
    expanding bracket ``[-2^k, 2^k]`` a safeguarded Newton iteration (bisection
    whenever the Newton step leaves the bracket) converges to ``S_TOL``.

    Raises
    ------
    OriginExcluded
        If some ``|x| < 1e-12``.
    BracketNotFound
        If ``|s|`` would exceed ``1e3``.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    X = x.reshape(-1, model.n)
    if np.any(np.linalg.norm(X, axis=1) < 1e-12):
        raise OriginExcluded("the origin has no polar coordinates")
    log_beta = math.log(beta)

    def h(s):
        y = _apply(_d_batch(model, -s), X)
        return np.log(quadratic_form_R(model, y)) - log_beta, y

    # initial guess from the isotropic case, then bracket
    s0 = 0.5 * (np.log(quadratic_form_R(model, X)) - log_beta)
    lo = np.full(X.shape[0], -1.0)
    hi = np.full(X.shape[0], 1.0)
    width = 1.0
    while True:
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                h_lo, _ = h(lo)
                h_hi, _ = h(hi)
            except (ValueError, OverflowError) as exc:
                raise BracketNotFound("polar bracket overflowed") from exc
        bad = ~((h_lo >= 0) & (h_hi <= 0))
        if not np.any(bad):
            break
        width *= 2.0
        if width > MAX_ABS_S:
            raise BracketNotFound(f"|s| would exceed {MAX_ABS_S:g}")
        lo = np.where(bad, -width, lo)
        hi = np.where(bad, width, hi)
    s = np.clip(s0, lo, hi)
    for _ in range(200):
        val, y = h(s)
        lo = np.where(val > 0, s, lo)
        hi = np.where(val > 0, hi, s)
        deriv = -speed(model, y) / quadratic_form_R(model, y)
        step = np.where(deriv < 0, -val / deriv, 0.0)
        s_new = s + step
        outside = ~((s_new > lo) & (s_new < hi)) | ~np.isfinite(s_new)
        s_new = np.where(outside, 0.5 * (lo + hi), s_new)
        done = (np.abs(s_new - s) <= S_TOL * max(1.0, float(np.max(np.abs(s))))) \
            | (hi - lo <= S_TOL)
        s = s_new
        if np.all(done):
            break
    x_tilde = _apply(_d_batch(model, -s), X)
    return PolarPoint(beta=float(beta), s=s.reshape(shape),
                      x_tilde=x_tilde.reshape(x.shape), x=x)


def polar_compose(model, s, x_tilde):
    return _apply(_d_batch(model, s), np.asarray(x_tilde, dtype=float))


def polar_density(model, x_tilde, t):
    """Density of ``dx`` against ``dS_0(x_tilde) dt``:
    ``e^{-t tr B} |Q^{1/2} Q_inf^{-1} x_tilde|^2 / (2 |Q_inf^{-1} x_tilde|)``."""
    x_tilde = np.asarray(x_tilde, dtype=float)
    z = x_tilde @ model.Q_inf_inv
    nz = np.linalg.norm(z, axis=-1)
    if np.any(nz == 0):
        raise OriginExcluded("x_tilde must be nonzero")
    return np.exp(-np.asarray(t) * model.trace_B) * speed(model, x_tilde) / nz


def ellipse_points(model, beta, theta):
    """Points of ``E_beta`` (n = 2) parametrized by the angle in whitened
    coordinates, with the arc-length element ``|d x / d theta|``."""
    if model.n != 2:
        raise ValueError("ellipse parametrization needs n = 2")
    theta = np.asarray(theta, dtype=float)
    r = math.sqrt(2.0 * beta)
    e = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    de = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
    L = model.chol_Q_inf
    return r * e @ L.T, r * np.linalg.norm(de @ L.T, axis=-1)


def polar_integral_2d(model, phi, beta=1.0, s_range=(-40.0, 40.0),
                      n_theta=256, n_s=400):
    """``int phi(x) dx`` over ``{x = D_s x_tilde : s in s_range}`` through the
    polar density (n = 2): trapezoid in the ellipse angle, Gauss-Legendre
    in ``s``."""
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    xt, arc = ellipse_points(model, beta, theta)
    g, w = np.polynomial.legendre.leggauss(n_s)
    a, b = s_range
    s = 0.5 * (b - a) * g + 0.5 * (a + b)
    ws = 0.5 * (b - a) * w
    D = _d_batch(model, s)
    pts = np.einsum("sij,kj->ski", D, xt)
    dens = polar_density(model, xt[None, :, :], s[:, None])
    vals = phi(pts) * dens * arc[None, :]
    return float(ws @ vals.sum(axis=1) * (2 * np.pi / n_theta))


def direct_integral_2d(model, phi, beta=None, s_range=None, n_theta=256,
                       n_r=400, r_max=40.0):
    """``int phi(x) dx`` by ordinary polar coordinates (n = 2).

    With ``beta`` and ``s_range`` the radial limits on each ray are those of
    the region ``{x = D_s x_tilde : s in s_range}``, found with
    :func:`polar_decompose` of the ray's unit vector.
    """
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    e = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    if beta is None:
        r0 = np.zeros(n_theta)
        r1 = np.full(n_theta, r_max)
    else:
        # |x| = r on the ray; R(D_{-s} r e) = r^2 R(D_{-s} e) = beta
        def radius(s):
            y = _apply(_d_batch(model, -np.full(n_theta, s)), e)
            return np.sqrt(beta / quadratic_form_R(model, y))
        r0, r1 = radius(s_range[0]), radius(s_range[1])
    g, w = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * (r1 - r0)[:, None] * g + 0.5 * (r1 + r0)[:, None]
    wr = 0.5 * (r1 - r0)[:, None] * w
    pts = r[..., None] * e[:, None, :]
    return float(np.sum(phi(pts) * r * wr) * (2 * np.pi / n_theta))


# -- tubes -------------------------------------------------------------------------

@dataclass(frozen=True)
class Tube:
    """``Z = {D_s x_tilde : s >= 0, x_tilde in E_beta, |x_tilde - center| < a}``."""

    beta: float
    center: np.ndarray
    aperture: float

    def contains(self, model, x):
        x = np.asarray(x, dtype=float)
        pp = polar_decompose(model, self.beta, x)
        cap = np.linalg.norm(pp.x_tilde - self.center, axis=-1) < self.aperture
        return (pp.s >= 0) & cap


def make_tube(model, beta, direction, aperture):
    """Tube whose cap is centred where the ray through ``direction`` meets
    ``E_beta``."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    center = d * math.sqrt(beta / quadratic_form_R(model, d))
    if not aperture > 0:
        raise ValueError("aperture must be positive")
    return Tube(float(beta), center, float(aperture))


@dataclass
class LevelSetEstimate:
    """Monte Carlo estimate of a Gaussian measure."""

    alpha: float
    measure_hat: float
    std_error: float
    sample_count: int
    seed: object
    hits: int = 0

    def to_record(self):
        return {"alpha": self.alpha, "measure_hat": self.measure_hat,
                "std_error": self.std_error, "sample_count": self.sample_count,
                "seed": self.seed, "hits": self.hits}


def sample_outside_level(model, beta, count, rng):
    """Exact draws of ``gamma_inf`` conditioned on ``R(x) >= beta``.

    In whitened coordinates ``|z|^2 = 2 R(x)`` is chi-square with ``n``
    degrees of freedom and the direction is uniform and independent.
    Returns the draws and the mass ``gamma_inf{R >= beta}``.
    """
    n = model.n
    mass = stats.chi2.sf(2.0 * beta, n)
    u = rng.random(count) * mass
    r2 = stats.chi2.isf(u, n)
    d = rng.standard_normal((count, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    z = d * np.sqrt(r2)[:, None]
    return z @ model.chol_Q_inf.T, float(mass)


def tube_gamma_measure(model, tube, mc_count=100_000, seed=0, beta_min=BETA_MIN,
                       method="conditional"):
    """Estimate ``gamma_inf(Z)``.

    ``method="conditional"`` samples ``gamma_inf`` restricted to
    ``{R >= beta}``, which contains ``Z``, and rescales by its exact mass;
    ``method="plain"`` samples ``gamma_inf`` itself.
    """
    if tube.beta < beta_min:
        raise BetaTooSmall(f"beta={tube.beta:g} is below beta_min={beta_min:g}")
    if mc_count < 10_000:
        raise ValueError("mc_count must be at least 1e4")
    rng = np.random.default_rng(seed)
    if method == "conditional":
        x, mass = sample_outside_level(model, tube.beta, mc_count, rng)
    elif method == "plain":
        x = rng.standard_normal((mc_count, model.n)) @ model.chol_Q_inf.T
        mass = 1.0
    else:
        raise ValueError(f"unknown method {method!r}")
    hit = tube.contains(model, x)
    p = hit.mean()
    se = math.sqrt(p * (1 - p) / mc_count)
    return LevelSetEstimate(alpha=float("nan"), measure_hat=mass * p,
                            std_error=mass * se, sample_count=mc_count,
                            seed=seed, hits=int(hit.sum()))


def tube_bound_report(model, betas=(4.0, 6.0, 9.0, 12.0), aperture=0.5,
                      direction=None, mc_count=100_000, seed=0, beta_min=BETA_MIN):
    """Report on ``gamma(Z) sqrt(beta) e^beta / min(a, sqrt(beta))^{n-1}``."""
    n = model.n
    direction = np.eye(n)[0] if direction is None else direction
    betas = np.asarray(betas, dtype=float)
    logs, ests = [], []
    for k, b in enumerate(betas):
        tube = make_tube(model, b, direction, aperture)
        est = tube_gamma_measure(model, tube, mc_count, seed=[seed, k],
                                 beta_min=beta_min)
        ests.append(est)
        logs.append(math.log(est.measure_hat) + 0.5 * math.log(b) + b
                    - (n - 1) * math.log(min(aperture, math.sqrt(b))))
    rep = assess_ratios(
        "tube-measure:gamma(Z)*sqrt(beta)*e^beta/min(a,sqrt(beta))^(n-1)",
        np.array(logs), scale=betas, kind=UPPER, open_ends=("high",),
        grid=f"beta in {tuple(betas.tolist())}, a={aperture:g}, {mc_count} samples",
        extremal={"beta": betas, "measure_hat": [e.measure_hat for e in ests],
                  "std_error": [e.std_error for e in ests]})
    return rep, ests


# -- distance estimates ------------------------------------------------------------

def _on_ellipsoid(model, beta, rng, count):
    d = rng.standard_normal((count, model.n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return math.sqrt(2.0 * beta) * d @ model.chol_Q_inf.T


def _project(model, beta, y):
    return y * np.sqrt(beta / quadratic_form_R(model, y))[:, None]


def distance_bounds_check(model, beta, count=10_000, seed=0,
                          scales=(1e-3, 1e-2, 1e-1, 1.0)):
    """Lower-bound reports for ``|x0 - x1| / |xt0 - xt1|`` and, when
    ``s1 >= 0``, ``|x0 - x1| / (sqrt(beta) |s0 - s1|)``.

    Pairs are built in polar coordinates: ``x0`` has ``R(x0) > beta/2``;
    ``x1`` perturbs ``(s0, xt0)`` at several scales, plus independent
    far-away partners. The slope test runs along the pair distance.
    """
    rng = np.random.default_rng(seed)
    t0 = _on_ellipsoid(model, beta, rng, count)
    s0 = rng.uniform(-1.0, 3.0, count)
    scale = rng.choice(np.asarray(scales), count)
    far = rng.random(count) < 0.2
    t1 = _project(model, beta, t0 + scale[:, None] * rng.standard_normal(t0.shape)
                  * math.sqrt(beta))
    t1[far] = _on_ellipsoid(model, beta, rng, int(far.sum()))
    s1 = s0 + scale * rng.standard_normal(count)
    s1[far] = rng.uniform(-1.0, 3.0, int(far.sum()))
    x0 = polar_compose(model, s0, t0)
    x1 = polar_compose(model, s1, t1)
    keep = quadratic_form_R(model, x0) > beta / 2
    dist = np.linalg.norm(x0 - x1, axis=1)
    dt = np.linalg.norm(t0 - t1, axis=1)
    ds = np.abs(s0 - s1)
    grid = f"beta={beta:g}, {count} pairs, perturbation scales {tuple(scales)}"

    def report(claim, sel, denom):
        sel = sel & (dist > 0) & (denom > 0)
        lr = np.log(dist[sel] / denom[sel])
        k = int(np.argmin(lr)) if lr.size else 0
        ext = {"x0": x0[sel][k], "x1": x1[sel][k]} if lr.size else {}
        return assess_ratios(claim, lr, scale=dist[sel], kind=LOWER, grid=grid,
                             extremal=ext)

    return [report("polar-distance:|x0-x1|/|xt0-xt1|", keep, dt),
            report("polar-time-distance:|x0-x1|/(sqrt(beta)|s0-s1|)", keep & (s1 >= 0),
                   math.sqrt(beta) * ds)]


# -- regions and the annulus -------------------------------------------------------

class RegionLabel(enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"


def region_is_global(x, u):
    """``|x - u| > 1 / (1 + |x|)``; ties belong to the local region."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return np.linalg.norm(x - u, axis=-1) > 1.0 / (1.0 + np.linalg.norm(x, axis=-1))


def region_classify(x, u):
    """Label of a single pair, or an object array of labels for a batch."""
    g = region_is_global(x, u)
    if np.ndim(g) == 0:
        return RegionLabel.GLOBAL if g else RegionLabel.LOCAL
    return np.where(g, RegionLabel.GLOBAL, RegionLabel.LOCAL)


def _check_alpha(alpha):
    if not alpha > math.e:
        raise ValueError("alpha must exceed e")


def annulus_membership(model, alpha, x):
    """``log(alpha)/2 <= R(x) <= 2 log(alpha)``."""
    _check_alpha(alpha)
    r = quadratic_form_R(model, x)
    la = math.log(alpha)
    return (r >= 0.5 * la) & (r <= 2.0 * la)


def level_tail_mass(n, level):
    """``gamma_inf{R > level}``: ``2R`` is chi-square with ``n`` degrees."""
    return stats.chi2.sf(2.0 * np.asarray(level, dtype=float), n)


def annulus_complement_report(model, alphas=(1e2, 1e3, 1e4, 1e5, 1e6)):
    """Report on ``alpha * gamma_inf{R > 2 log alpha}`` along ``alpha``."""
    alphas = np.asarray(alphas, dtype=float)
    for a in alphas:
        _check_alpha(a)
    mass = level_tail_mass(model.n, 2.0 * np.log(alphas))
    return assess_ratios("annulus-tail:alpha*gamma{R>2log(alpha)}",
                         np.log(alphas * mass), scale=alphas, kind=UPPER,
                         open_ends=("high",),
                         grid=f"alpha in {tuple(alphas.tolist())}, chi-square tail",
                         extremal={"alpha": alphas, "mass": mass})


def annulus_complement_mc(model, alpha, count=1_000_000, seed=0):
    """Plain Monte Carlo of ``gamma_inf{R > 2 log alpha}``."""
    _check_alpha(alpha)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((count, model.n)) @ model.chol_Q_inf.T
    hit = quadratic_form_R(model, x) > 2.0 * math.log(alpha)
    p = hit.mean()
    return LevelSetEstimate(alpha=float(alpha), measure_hat=float(p),
                            std_error=math.sqrt(p * (1 - p) / count),
                            sample_count=count, seed=seed, hits=int(hit.sum()))


# -- derivative identities ---------------------------------------------------------

def derivative_identities_check(model, count=1000, seed=0, fd_step=1e-3):
    """Identity checks and fitted-constant reports for the flow ``s -> D_s x``.

    Returns a list mixing :class:`~oulab.reports.IdentityCheck` and
    :class:`~oulab.reports.KernelBoundReport`.
    """
    rng = np.random.default_rng(seed)
    n = model.n
    x = rng.standard_normal((count, n)) * np.exp(rng.uniform(-2, 2, (count, 1)))
    s = rng.uniform(-3.0, 3.0, count)
    t = np.exp(rng.uniform(math.log(1e-3), 0.0, count))
    Qi = model.Q_inf_inv
    out = []

    lhs = np.einsum("ki,ki->k", x @ Qi @ model.B, x)      # <B^T Qi x, x>
    rhs = -speed(model, x)
    out.append(identity_check("flow-speed", np.abs(lhs - rhs) / np.abs(rhs), IDENTITY_TOL))

    Ds = _d_batch(model, s)
    Dx = _apply(Ds, x)
    A = -model.Q_inf @ model.B.T @ Qi
    v_gen = Dx @ A.T
    v_exp = -_apply(model.Q_inf @ matrix_exp(model.B.T, -s) @ model.B.T @ Qi, x)
    nv = np.linalg.norm(v_exp, axis=1)
    out.append(identity_check("flow-velocity:generator form",
                              np.linalg.norm(v_gen - v_exp, axis=1) / nv, IDENTITY_TOL))
    def central(h):
        return (_apply(_d_batch(model, s + h), x) - _apply(_d_batch(model, s - h), x)) / (2 * h)

    # Richardson-extrapolated central difference: O(h^4) truncation lets h stay
    # large enough that rounding in D_s x does not dominate
    fd = (4 * central(fd_step) - central(2 * fd_step)) / 3
    out.append(identity_check("flow-velocity:finite difference",
                              np.linalg.norm(fd - v_exp, axis=1) / nv, 1e-6))

    dR = np.einsum("ki,ki->k", Dx @ Qi, v_exp)
    sp = speed(model, Dx)
    out.append(identity_check("level-derivative", np.abs(dR - sp) / sp, IDENTITY_TOL))
    out.append(assess_ratios("level-derivative:dR(D_s x)/ds/|D_s x|^2",
                             np.log(sp / np.sum(Dx * Dx, axis=1)), kind=TWO_SIDED,
                             grid=f"{count} draws, s in [-3, 3]"))

    Dt = _d_batch(model, t)
    r = np.linalg.norm(x - _apply(Dt, x), axis=1) / (t * np.linalg.norm(x, axis=1))
    out.append(assess_ratios("drift-displacement:|x-D_t x|/(t|x|)", np.log(r), scale=t,
                             kind=UPPER, open_ends=("low",),
                             grid=f"{count} draws, t log-uniform on [1e-3, 1]"))

    xt = x
    w = _apply(matrix_exp(model.B, s), xt) @ Qi             # Q_inf^{-1} e^{sB} x
    inner = np.einsum("ki,ki->k", v_exp, w)
    target = speed(model, xt)
    # the terms of <v, w> scale like |e^{-sB}| |e^{sB}|, so rounding is
    # measured against |v| |w| rather than the (possibly much smaller) target
    scale = np.linalg.norm(v_exp, axis=1) * np.linalg.norm(w, axis=1)
    out.append(identity_check("transversality:identity",
                              np.abs(inner - target) / np.maximum(scale, target),
                              IDENTITY_TOL))
    out.append(assess_ratios("transversality:<d/ds D_s x, w>/|x|^2",
                             np.log(inner / np.sum(xt * xt, axis=1)), kind=LOWER,
                             grid=f"{count} draws, s in [-3, 3]"))
    return out
