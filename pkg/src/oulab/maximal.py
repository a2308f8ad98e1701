"""Maximal operator, level-set measures and the scans built on them.

``H_* f(x) = sup_t |H_t f(x)|`` is taken over a log-spaced time grid with
adaptive refinement around the argmax. For Gaussian-family ``f`` every
``H_t f`` is available in closed form, which is what makes level-set scans
over ``10^5`` points affordable; other functions go through quadrature.

Level sets are measured by importance sampling from a defensive mixture of
``gamma_inf``, ``gamma_inf`` conditioned on ``{R >= beta}`` and Gaussians
placed where the level set lives.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special, stats

from .core import gaussian_measure, matrix_family, quadratic_form_R
from .errors import (GridTooCoarse, QuadratureNotConverged, SampleBudgetTooSmall,
                     WidthNotConverged)
from .geometry import LevelSetEstimate, Tube, annulus_membership, sample_outside_level
from .kernel import (TestFunction, apply_semigroup, dirac_approx,
                     log_gaussian_semigroup)
from .quadrature import ball_rule, check_tensor_dim, sphere_rule

VARIANTS = ("full", "local", "global", "large_t")
SLOPE_TOL = 0.1
MIN_HITS = 10
CELL_BUDGET = 2 ** 20  # (point, time) pairs per evaluation chunk


# -- time grid ---------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Log-spaced grid on ``[t_min, t_max]`` with argmax refinement.

    Each refinement round divides the log spacing by ``refine_factor`` and
    evaluates the new points strictly between the current argmax and its
    neighbours, so the refined sup is a max over a superset.
    """

    t_min: float = 1e-3
    t_max: float = 20.0
    per_decade: int = 64
    refine_rounds: int = 3
    refine_factor: int = 4

    def __post_init__(self):
        if not 0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")
        if self.per_decade < 1 or self.refine_rounds < 0 or self.refine_factor < 2:
            raise ValueError("invalid grid resolution")

    def points(self):
        k = max(2, math.ceil(self.per_decade * math.log10(self.t_max / self.t_min)) + 1)
        return np.geomspace(self.t_min, self.t_max, k)

    @property
    def log_step(self):
        return math.log(self.t_max / self.t_min) / (self.points().size - 1)

    def describe(self):
        return (f"t in [{self.t_min:g}, {self.t_max:g}], {self.per_decade}/decade, "
                f"{self.refine_rounds} refinements x{self.refine_factor}")


def _grid_for(grid, variant):
    grid = grid or TimeGrid()
    if variant == "large_t" and grid.t_min < 1.0:
        grid = replace(grid, t_min=1.0, t_max=max(grid.t_max, 2.0))
    return grid


# -- H_t f with region restrictions ------------------------------------------------

def _radial_moment(k, a, mu, r):
    """``int_0^r rho^k exp(-a (rho - mu)^2 / 2) d rho`` by upward recursion."""
    s = np.sqrt(0.5 * a)
    A = s * (r - mu)
    Bv = s * mu
    with np.errstate(invalid="ignore"):
        e = np.where(A < 0, special.erfc(-A) - special.erfc(Bv),
                     np.where(Bv < 0, special.erfc(-Bv) - special.erfc(A),
                              special.erf(A) + special.erf(Bv)))
    J0 = np.sqrt(0.5 * np.pi / a) * e
    if k == 0:
        return J0
    e_r = np.exp(-0.5 * a * (r - mu) ** 2)
    e_0 = np.exp(-0.5 * a * mu ** 2)
    prev, cur = J0, mu * J0 - (e_r - e_0) / a
    for j in range(2, k + 1):
        prev, cur = cur, mu * cur + (j - 1) / a * prev - r ** (j - 1) * e_r / a
    return cur


def _sphere_orders(n):
    return {1: [1], 2: [32, 64, 128, 256, 512, 1024, 2048],
            3: [8, 16, 32, 64], 4: [4, 8, 16, 24]}[n]


def gaussian_ball_probability(mean, precision, center, radius, rtol=1e-7):
    """``P(|U - center| <= radius)`` for ``U ~ N(mean, precision^{-1})``.

    Along each direction of a sphere rule the radial integral is done in
    closed form; the direction rule is refined until the change is below
    ``rtol`` (relative) plus ``1e-12`` (absolute). All arguments broadcast
    over a leading batch axis.
    """
    mean = np.atleast_2d(mean)
    N, n = mean.shape
    check_tensor_dim(n)
    P = np.broadcast_to(precision, (N, n, n))
    center = np.broadcast_to(center, (N, n))
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (N,))
    d = center - mean
    c = np.einsum("ki,kij,kj->k", d, P, d)
    logdet = np.linalg.slogdet(P)[1]
    out = np.full(N, np.nan)
    active = np.arange(N)
    prev = None
    for order in _sphere_orders(n):
        dirs, wd = sphere_rule(n, order)
        Pa, da = P[active], d[active]
        a = np.einsum("ki,nij,kj->nk", dirs, Pa, dirs)
        b = np.einsum("ki,nij,nj->nk", dirs, Pa, da)
        mu = -b / a
        q = np.maximum(c[active, None] - b * b / a, 0.0)
        J = _radial_moment(n - 1, a, mu, radius[active, None])
        logpre = -0.5 * n * math.log(2 * math.pi) + 0.5 * logdet[active, None] - 0.5 * q
        val = np.clip(np.sum(wd * np.exp(logpre) * J, axis=1), 0.0, 1.0)
        if n == 1:
            out[active] = val
            return out
        if prev is not None:
            done = np.abs(val - prev) <= rtol * val + 1e-12
            out[active[done]] = val[done]
            active, val = active[~done], val[~done]
            if active.size == 0:
                return out
        prev = val
    raise QuadratureNotConverged(
        f"ball probability not converged for {active.size} points")


def _local_radius(X):
    return 1.0 / (1.0 + np.linalg.norm(X, axis=-1))


def _log_values(model, f, t, X, variant, floor=None):
    """``log |H_t f(x)|`` (restricted to ``L``/``G`` for those variants).

    ``t`` has shape ``(m, k)`` and ``X`` shape ``(m, n)``. With ``floor``
    given, region splits are skipped where the full value is already at or
    below ``floor``; the full value is returned there, an upper bound.
    """
    m, k = t.shape
    if f.gaussian_factor is not None:
        full = log_gaussian_semigroup(model, f, t, X[:, None, :])
    else:
        full = _quadrature_values(model, f, t, X)
    if variant in ("full", "large_t"):
        return full
    need = np.isfinite(full)
    if floor is not None:
        need &= full > floor
    idx = np.nonzero(need)
    if idx[0].size == 0:
        return full
    Xs = X[idx[0]]
    ts = t[idx]
    if f.gaussian_factor is not None:
        p_local = _gaussian_local_fraction(model, f, ts, Xs)
    else:
        p_local = _quadrature_local(model, f, ts, Xs) / np.exp(full[idx])
    frac = p_local if variant == "local" else 1.0 - p_local
    out = full.copy()
    with np.errstate(divide="ignore"):
        out[idx] = full[idx] + np.log(np.clip(frac, 0.0, None))
    return out


def _gaussian_local_fraction(model, f, ts, Xs):
    """Share of ``H_t f(x)`` coming from ``u`` in the local ball of ``x``.

    ``gamma_t``-convolution times the Gaussian ``f`` is a Gaussian in ``u``
    with precision ``Q_t^{-1} + I / w^2``.
    """
    c, w = f.gaussian_factor
    n = model.n
    uniq, inv = np.unique(ts, return_inverse=True)
    fam = matrix_family(model, uniq)
    prec = fam.Qt_inv + np.eye(n) / w ** 2
    h = np.einsum("kij,kjl,kl->ki", fam.Qt_inv[inv], fam.expB[inv], Xs) + c / w ** 2
    mean = np.linalg.solve(prec[inv], h[..., None])[..., 0]
    return gaussian_ball_probability(mean, prec[inv], Xs, _local_radius(Xs))


def _quadrature_values(model, f, t, X):
    """Kernel-route quadrature per distinct time; slow, for small batches."""
    out = np.empty(t.shape)
    uniq, inv = np.unique(t, return_inverse=True)
    inv = inv.reshape(t.shape)
    for j, s in enumerate(uniq):
        rows, cols = np.nonzero(inv == j)
        v = apply_semigroup(model, s, f, X[rows], route="kernel_gamma_quadrature").value
        out[rows, cols] = v
    with np.errstate(divide="ignore"):
        return np.log(np.abs(out))


def _quadrature_local(model, f, ts, Xs, order=64):
    """``int_{|u - x| <= r(x)} f(u) gamma_t(u - e^{tB}x) du`` by a ball rule."""
    n = model.n
    Y, W = ball_rule(n, order)
    r = _local_radius(Xs)
    out = np.empty(ts.size)
    for i, (s, x, rad) in enumerate(zip(ts, Xs, r)):
        g = gaussian_measure(model, s)
        U = x + rad * Y
        dens = np.exp(g.log_density(U - model.expm(s) @ x))
        out[i] = rad ** n * np.sum(W * f(U) * dens)
    return out


# -- maximal function --------------------------------------------------------------

@dataclass
class MaximalEval:
    """Grid supremum of ``|H_t f(x)|`` for a batch of points."""

    x: np.ndarray
    grid: str
    variant: str
    route: str
    log_sup: np.ndarray
    argmax_t: np.ndarray
    coarse_log_sup: np.ndarray
    cross_check: dict = field(default_factory=dict)

    @property
    def sup_value(self):
        with np.errstate(over="ignore"):
            return np.exp(self.log_sup)

    @property
    def coarse_sup(self):
        with np.errstate(over="ignore"):
            return np.exp(self.coarse_log_sup)


def _map_chunks(fn, m, per_row, workers):
    step = max(1, CELL_BUDGET // max(per_row, 1))
    slices = [slice(a, min(m, a + step)) for a in range(0, m, step)]
    if workers and workers > 1 and len(slices) > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, slices))
    return [fn(sl) for sl in slices]


def _log_sup(model, f, X, grid, variant, floor=None):
    """Return ``(log_sup, argmax_t, coarse_log_sup)`` for points ``X``."""
    ts = grid.points()
    m = X.shape[0]
    lv = _log_values(model, f, np.broadcast_to(ts, (m, ts.size)), X, variant, floor)
    rows = np.arange(m)
    j = np.argmax(lv, axis=1)
    best = lv[rows, j]
    coarse = best.copy()
    t_best = ts[j]
    h = grid.log_step
    for _ in range(grid.refine_rounds):
        h /= grid.refine_factor
        offs = np.arange(1, grid.refine_factor) * h
        offs = np.concatenate([-offs[::-1], offs])
        tt = np.clip(t_best[:, None] * np.exp(offs), grid.t_min, grid.t_max)
        lv = _log_values(model, f, tt, X, variant, floor)
        j = np.argmax(lv, axis=1)
        cand = lv[rows, j]
        better = cand > best
        best = np.where(better, cand, best)
        t_best = np.where(better, tt[rows, j], t_best)
    return best, t_best, coarse


def maximal_function(model, f, x, t_min=1e-3, t_max=20.0, grid=None,
                     variant="full", workers=1):
    """Evaluate ``sup_t |H_t f(x)|`` on a refined log grid.

    Parameters
    ----------
    f : TestFunction
    x : array_like, shape (..., n)
    grid : TimeGrid, optional
        Overrides ``t_min`` and ``t_max``.
    variant : {"full", "local", "global", "large_t"}
        ``local``/``global`` restrict the ``u``-integration to the local or
        global region of ``x``; ``large_t`` takes the sup over ``t >= 1``.

    Returns
    -------
    MaximalEval
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if not isinstance(f, TestFunction):
        raise TypeError("f must be a TestFunction")
    grid = _grid_for(grid or TimeGrid(t_min=t_min, t_max=t_max), variant)
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    X = x.reshape(-1, model.n)
    k = grid.points().size

    def run(sl):
        return _log_sup(model, f, X[sl], grid, variant)

    parts = _map_chunks(run, X.shape[0], k, workers)
    log_sup, arg_t, coarse = (np.concatenate(p) for p in zip(*parts))
    route = "kernel_closed_form" if f.gaussian_factor is not None else "kernel_quadrature"
    cross = {}
    if f.gaussian_factor is not None and variant in ("full", "large_t"):
        kol = log_gaussian_semigroup(model, f, arg_t, X, route="kolmogorov")
        cross["kolmogorov_closed_form"] = np.exp(kol).reshape(shape)
    return MaximalEval(x=x, grid=grid.describe(), variant=variant, route=route,
                       log_sup=log_sup.reshape(shape), argmax_t=arg_t.reshape(shape),
                       coarse_log_sup=coarse.reshape(shape), cross_check=cross)


# -- importance sampling -----------------------------------------------------------

@dataclass(frozen=True)
class Proposal:
    """Defensive mixture proposal for estimating ``gamma_inf`` measures.

    Components are ``gamma_inf`` itself, ``gamma_inf`` conditioned on
    ``{R >= beta}`` for each ``(beta, weight)`` in ``shells`` and isotropic
    Gaussians for each ``(center, sigma, weight)`` in ``gaussians``. The
    ``gamma_inf`` component keeps every importance weight below
    ``1 / gamma_weight``.
    """

    gamma_weight: float = 1.0
    shells: tuple = ()
    gaussians: tuple = ()

    def __post_init__(self):
        total = self.gamma_weight + sum(w for _, w in self.shells) \
            + sum(w for _, _, w in self.gaussians)
        if not math.isclose(total, 1.0, rel_tol=1e-9) or self.gamma_weight <= 0:
            raise ValueError("mixture weights must be positive and sum to 1")

    def _weights(self):
        return np.array([self.gamma_weight] + [w for _, w in self.shells]
                        + [w for _, _, w in self.gaussians])

    def sample(self, model, count, rng):
        n = model.n
        counts = rng.multinomial(count, self._weights())
        parts = [rng.standard_normal((counts[0], n)) @ model.chol_Q_inf.T]
        for (beta, _), c in zip(self.shells, counts[1:]):
            parts.append(sample_outside_level(model, beta, c, rng)[0])
        for (center, sigma, _), c in zip(self.gaussians, counts[1 + len(self.shells):]):
            parts.append(np.asarray(center) + sigma * rng.standard_normal((c, n)))
        return np.concatenate(parts)

    def log_weight(self, model, X):
        """``log gamma_inf(X) - log q(X)``."""
        n = model.n
        log_g = gaussian_measure(model).log_density(X)
        comps = [math.log(self.gamma_weight) + log_g]
        R = quadratic_form_R(model, X)
        for beta, w in self.shells:
            mass = stats.chi2.sf(2.0 * beta, n)
            comps.append(np.where(R >= beta, math.log(w) + log_g - math.log(mass),
                                  -np.inf))
        for center, sigma, w in self.gaussians:
            d2 = np.sum((X - np.asarray(center)) ** 2, axis=-1)
            comps.append(math.log(w) - 0.5 * n * math.log(2 * math.pi * sigma ** 2)
                         - 0.5 * d2 / sigma ** 2)
        return log_g - special.logsumexp(np.stack(comps), axis=0)


PLAIN = Proposal()


def _flow_points(model, c, times):
    return [model.d(-s) @ c for s in times]


def default_proposal(model, f, alpha, variant="full", t=None, anchors=()):
    """Mixture aimed at ``{H f > alpha}`` for a Gaussian-family ``f``.

    Gaussians sit on the centre of ``f`` (at scales set by the Dirac-type
    level set radius ``(alpha gamma_inf(c))^{-1/n}``) and on points
    ``D_{-s} c`` the flow brings to the centre; shells cover
    ``R >= log(alpha) / 2`` and ``R >= log(alpha) - 2``.
    """
    n = model.n
    la = math.log(alpha)
    betas = sorted({b for b in (0.5 * la, la - 2.0) if b > 0.5})
    gauss = []
    if f.gaussian_factor is not None:
        c = f.gaussian_factor[0]
        if variant == "large_t":
            pts = _flow_points(model, c, (1.0, 1.5, 2.0, 3.0, 5.0))
            gauss += [(p, s) for p in pts for s in (0.5, 1.0)]
        elif t is not None:
            gauss += [(model.d(-t) @ c, s) for s in (0.25, 0.5, 1.0)]
        else:
            log_gc = float(gaussian_measure(model).log_density(c))
            r = min(1.0, math.exp(-(la + log_gc) / n))
            gauss += [(c, s * r) for s in (0.3, 1.0, 3.0)]
            gauss += [(p, 0.5) for p in _flow_points(model, c, (0.5, 1.0, 2.0))]
    gauss += [(np.asarray(a, dtype=float), s) for a, s in anchors]
    w_shell = 0.3 / len(betas) if betas else 0.0
    w_gauss = (0.9 - w_shell * len(betas)) / len(gauss) if gauss else 0.0
    g_w = 1.0 - w_shell * len(betas) - w_gauss * len(gauss)
    return Proposal(gamma_weight=g_w,
                    shells=tuple((b, w_shell) for b in betas),
                    gaussians=tuple((tuple(np.asarray(p, dtype=float)), s, w_gauss)
                                    for p, s in gauss))


def _evaluate(model, f, X, evaluator, grid, workers, floor):
    """``log`` of the evaluator at ``X``: a variant name or a fixed time."""
    if isinstance(evaluator, str):
        if evaluator not in VARIANTS:
            raise ValueError(f"unknown evaluator {evaluator!r}")
        g = _grid_for(grid, evaluator)

        def run(sl):
            return _log_sup(model, f, X[sl], g, evaluator, floor)[0]
        return np.concatenate(_map_chunks(run, X.shape[0], g.points().size, workers))
    t = float(evaluator)
    if f.gaussian_factor is not None:
        return log_gaussian_semigroup(model, f, t, X)
    with np.errstate(divide="ignore"):
        return np.log(np.abs(apply_semigroup(model, t, f, X).value))


def _weighted_samples(model, f, alpha, evaluator, mc_count, seed, proposal, grid,
                      workers):
    rng = np.random.default_rng(seed)
    X = proposal.sample(model, mc_count, rng)
    logw = proposal.log_weight(model, X)
    lv = _evaluate(model, f, X, evaluator, grid, workers, floor=math.log(alpha))
    return X, np.exp(logw), lv


def _estimate(alpha, weights, hit, seed, min_hits):
    hits = int(hit.sum())
    if hits < min_hits:
        raise SampleBudgetTooSmall(
            f"only {hits} samples hit the level set at alpha={alpha:g}")
    z = np.where(hit, weights, 0.0)
    p = float(np.clip(z.mean(), 0.0, 1.0))
    se = float(z.std() / math.sqrt(z.size))
    return p, se, hits


def level_set_measure(model, f, alpha, evaluator="full", mc_count=100_000, seed=0,
                      proposal=None, grid=None, workers=1, min_hits=MIN_HITS):
    """Estimate ``gamma_inf{x : E f(x) > alpha}``.

    ``evaluator`` is a maximal variant (``full``, ``local``, ``global``,
    ``large_t``) or a fixed time ``t`` for ``H_t`` itself. ``proposal`` is a
    :class:`Proposal`, ``"plain"`` for plain Monte Carlo over
    ``gamma_inf`` (binomial standard error), or ``None`` for
    :func:`default_proposal`.

    Raises
    ------
    SampleBudgetTooSmall
        If fewer than ``min_hits`` samples land in the level set.
    """
    if not alpha > 1:
        raise ValueError("alpha must exceed 1")
    if mc_count < 1:
        raise ValueError("mc_count must be positive")
    if f.sup_bound <= alpha:
        # |H_t f| <= sup |f| for every t
        return LevelSetEstimate(alpha=float(alpha), measure_hat=0.0, std_error=0.0,
                                sample_count=int(mc_count), seed=seed, hits=0)
    if proposal is None:
        t = None if isinstance(evaluator, str) else float(evaluator)
        variant = evaluator if isinstance(evaluator, str) else "full"
        proposal = default_proposal(model, f, alpha, variant, t=t)
    elif proposal == "plain":
        proposal = PLAIN
    _, w, lv = _weighted_samples(model, f, alpha, evaluator, mc_count, seed,
                                 proposal, grid, workers)
    p, se, hits = _estimate(alpha, w, lv > math.log(alpha), seed, min_hits)
    return LevelSetEstimate(alpha=float(alpha), measure_hat=p, std_error=se,
                            sample_count=int(mc_count), seed=seed, hits=hits)


# -- scans -------------------------------------------------------------------------

@dataclass
class ScanReport:
    """Table of ``alpha``-scaled level-set measures with a growth test."""

    claim_id: str
    rows: list
    slopes: dict
    max_statistic: float
    passed: bool
    grid: str = ""

    COLUMNS = ("family_index", "alpha", "measure_hat", "std_error", "statistic",
               "hits", "pass")

    def table(self):
        return [tuple(r[c] for c in self.COLUMNS) for r in self.rows]

    def to_record(self):
        return {"claim_id": self.claim_id, "rows": self.rows, "slopes": self.slopes,
                "max_statistic": self.max_statistic, "passed": self.passed,
                "grid": self.grid}


def growth_slope(alphas, stats_, ses):
    """Least-squares slope of ``log stat`` against ``log alpha`` and its
    standard error from the per-cell standard errors (delta method)."""
    x = np.log(np.asarray(alphas, dtype=float))
    s = np.asarray(stats_, dtype=float)
    if np.any(s <= 0) or x.size < 2:
        return -math.inf if np.any(s <= 0) else 0.0, 0.0
    y = np.log(s)
    sy = np.asarray(ses, dtype=float) / s
    dx = x - x.mean()
    sxx = float(dx @ dx)
    return float(dx @ (y - y.mean()) / sxx), float(math.sqrt(np.sum(dx ** 2 * sy ** 2)) / sxx)


def _family_at(f_family, alpha):
    fam = f_family(alpha) if callable(f_family) else f_family
    return list(fam)


def _scan(model, claim_id, f_family, alpha_grid, mc_budget, seed, evaluator, scale,
          grid, workers, min_hits, proposal_for=None):
    alphas = [float(a) for a in alpha_grid]
    rows = []
    for ia, alpha in enumerate(alphas):
        for jf, f in enumerate(_family_at(f_family, alpha)):
            l1 = f.l1_norm(model)
            if abs(l1 - 1.0) > 0.01:
                raise ValueError(f"family member {jf} has L1 norm {l1:.4g}, not 1")
            prop = proposal_for(f, alpha) if proposal_for else None
            cell_seed = [seed, ia, jf]
            try:
                est = level_set_measure(model, f, alpha, evaluator, mc_budget,
                                        cell_seed, prop, grid, workers, min_hits=1)
            except SampleBudgetTooSmall:
                est = LevelSetEstimate(alpha, 0.0, 0.0, mc_budget, cell_seed, 0)
            exact_zero = est.hits == 0 and f.sup_bound <= alpha
            ok = exact_zero or est.hits >= min_hits
            rows.append({"family_index": jf, "alpha": alpha,
                         "measure_hat": est.measure_hat / l1,
                         "std_error": est.std_error / l1,
                         "statistic": scale(alpha) * est.measure_hat / l1,
                         "stat_se": scale(alpha) * est.std_error / l1,
                         "hits": est.hits, "pass": bool(ok)})
    slopes = {}
    ok = all(r["pass"] for r in rows)
    stats_all = np.array([r["statistic"] for r in rows])
    max_stat = float(stats_all.max()) if rows else math.nan
    ok &= bool(np.isfinite(max_stat))
    n_f = 1 + max(r["family_index"] for r in rows) if rows else 0
    groups = {f"f{j}": [r for r in rows if r["family_index"] == j] for j in range(n_f)}
    per_alpha = []
    for a in alphas:
        cells = [r for r in rows if r["alpha"] == a]
        per_alpha.append(max(cells, key=lambda r: r["statistic"]))
    groups["max"] = per_alpha
    for name, cells in groups.items():
        if len(cells) < 2 or all(r["statistic"] == 0 for r in cells):
            continue
        b, sb = growth_slope([r["alpha"] for r in cells],
                             [r["statistic"] for r in cells],
                             [r["stat_se"] for r in cells])
        slopes[name] = {"slope": b, "slope_se": sb}
        ok &= b <= SLOPE_TOL + 2.0 * sb
    return ScanReport(claim_id=claim_id, rows=rows, slopes=slopes,
                      max_statistic=max_stat, passed=bool(ok),
                      grid=f"alpha in {tuple(alphas)}, {mc_budget} samples/cell")


def level_point(model, beta, direction):
    """The point of ``{R = beta}`` on the ray through ``direction``."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    return d * math.sqrt(beta / float(quadratic_form_R(model, d)))


def weaktype_width(model, center, alpha):
    """Dirac width resolving the level set near ``center`` at height ``alpha``:
    a quarter of ``(alpha gamma_inf(c))^{-1/n}``, capped at
    ``0.05 / sqrt(log alpha)``."""
    log_gc = float(gaussian_measure(model).log_density(center))
    r = math.exp(-(math.log(alpha) + log_gc) / model.n)
    return min(0.05 / math.sqrt(math.log(alpha)), 0.25 * r)


def weaktype_family(model, centers=None):
    """``alpha -> [dirac_approx(c, weaktype_width(c, alpha)) for c in centers]``."""
    n = model.n
    if centers is None:
        base = np.zeros((3, n))
        base[1, 0], base[2, 0] = 1.0, -1.5
        if n > 1:
            base[1, 1], base[2, 1] = -0.5, 1.0
        centers = base
    centers = [np.asarray(c, dtype=float) for c in centers]

    def family(alpha):
        return [dirac_approx(model, c, weaktype_width(model, c, alpha)) for c in centers]
    return family


def weaktype_grid(model, f_family, alpha_grid, t_max=20.0):
    """Time grid whose lower end resolves the narrowest Dirac in the family."""
    widths = [f.gaussian_factor[1] for a in alpha_grid for f in _family_at(f_family, a)
              if f.gaussian_factor is not None]
    t_min = min([1e-3] + [0.1 * w * w for w in widths])
    return TimeGrid(t_min=t_min, t_max=t_max)


def weaktype_scan(model, f_family=None, alpha_grid=(1e2, 1e3, 1e4), mc_budget=100_000,
                  seed=0, variant="full", grid=None, workers=1, min_hits=100):
    """Table of ``alpha gamma{H_* f > alpha} / |f|_1`` over family x alphas.

    ``f_family`` is a list of functions or a callable ``alpha -> list``
    (default :func:`weaktype_family`). Passes when every cell has at least
    ``min_hits`` hits (or is exactly zero), the maximum is finite and no
    growth slope in ``log alpha`` exceeds ``0.1`` plus two standard errors.
    """
    f_family = weaktype_family(model) if f_family is None else f_family
    grid = grid or weaktype_grid(model, f_family, alpha_grid)
    return _scan(model, f"weaktype:{variant}:alpha*gamma{{H*f>alpha}}", f_family,
                 alpha_grid, mc_budget, seed, variant, lambda a: a, grid, workers,
                 min_hits)


def large_t_family(model, direction=None, flow_times=(1.5, 3.0)):
    """``alpha -> `` Diracs at ``D_s z`` with ``R(z) = log alpha``."""
    direction = np.eye(model.n)[0] if direction is None else direction

    def family(alpha):
        z = level_point(model, math.log(alpha), direction)
        w = 0.05 / math.sqrt(math.log(alpha))
        return [dirac_approx(model, model.d(s) @ z, w) for s in flow_times]
    return family


def large_t_refinement_scan(model, f_family=None, alpha_grid=(1e2, 1e3, 1e4),
                            mc_budget=100_000, seed=0, grid=None, workers=1,
                            min_hits=100):
    """Table of ``alpha sqrt(log alpha) gamma{sup_{t>1} H_t f > alpha}``."""
    if min(alpha_grid) < 10:
        raise ValueError("alpha must be at least 10")
    f_family = large_t_family(model) if f_family is None else f_family
    return _scan(model, "large_t:alpha*sqrt(log alpha)*gamma{sup_t>1 H_t f>alpha}",
                 f_family, alpha_grid, mc_budget, seed, "large_t",
                 lambda a: a * math.sqrt(math.log(a)), grid, workers, min_hits)


# -- sharpness ---------------------------------------------------------------------

@dataclass
class SharpnessResult:
    alpha: float
    t: float
    ratio: float
    c0: float
    width: float
    measure_hat: float
    std_error: float
    hits: int
    sample_count: int
    seed: object
    halvings: int

    def to_record(self):
        return dict(self.__dict__)


def sharpness_setup(model, alpha, t, direction=None):
    """``z`` with ``R(z) = log alpha`` along ``direction`` and ``u0 = D_t z``."""
    direction = np.eye(model.n)[0] if direction is None else direction
    z = level_point(model, math.log(alpha), direction)
    return z, model.d(t) @ z


def _calibrate(alpha, weights, lv, target, min_hits):
    """``log c0`` making the weighted measure of ``{lv > log(c0 alpha)}`` equal
    ``target``."""
    v = lv - math.log(alpha)
    order = np.argsort(-v)
    cum = np.cumsum(weights[order]) / v.size
    k = int(np.searchsorted(cum, target))
    if k + 1 >= v.size or k + 1 < min_hits:
        raise SampleBudgetTooSmall("too few samples to calibrate c0")
    return 0.5 * (v[order[k]] + v[order[k + 1]])


def sharpness_experiment(model, t, alpha, dirac_width=None, mc_count=100_000, seed=0,
                         c0=None, direction=None, max_halvings=6, rtol=0.1):
    """``alpha sqrt(log alpha) gamma{H_t f > c0 alpha}`` for ``f`` a Dirac
    approximation at ``D_t z``, ``R(z) = log alpha``.

    With ``c0=None`` the constant is fitted so that the ratio equals one at
    this ``alpha``. The width starts at ``0.05 / sqrt(log alpha)`` unless
    given and is halved until the ratio moves by less than ``rtol``; all
    widths share the same samples.

    Raises
    ------
    WidthNotConverged
        If ``max_halvings`` halvings do not stabilise the ratio.
    """
    if not t > 1:
        raise ValueError("sharpness needs t > 1")
    if not alpha >= 100:
        raise ValueError("sharpness needs alpha >= 1e2")
    la = math.log(alpha)
    scale = alpha * math.sqrt(la)
    z, u0 = sharpness_setup(model, alpha, t, direction)
    width = 0.05 / math.sqrt(la) if dirac_width is None else float(dirac_width)
    prop = Proposal(gamma_weight=0.1, shells=((max(la - 2.0, 0.5 * la), 0.3),),
                    gaussians=tuple((tuple(z), s, 0.2) for s in (0.25, 0.5, 1.0)))
    rng = np.random.default_rng(seed)
    X = prop.sample(model, mc_count, rng)
    w = np.exp(prop.log_weight(model, X))

    def run(width, log_c0):
        f = dirac_approx(model, u0, width)
        lv = log_gaussian_semigroup(model, f, t, X)
        if log_c0 is None:
            log_c0 = _calibrate(alpha, w, lv, 1.0 / scale, MIN_HITS)
        p, se, hits = _estimate(alpha, w, lv > la + log_c0, seed, MIN_HITS)
        return scale * p, p, se, hits, log_c0

    log_c0 = None if c0 is None else math.log(c0)
    r_prev, p, se, hits, log_c0 = run(width, log_c0)
    for k in range(1, max_halvings + 1):
        r_next, p, se, hits, _ = run(width / 2, log_c0)
        width /= 2
        if abs(r_next - r_prev) <= rtol * r_next:
            return SharpnessResult(alpha=float(alpha), t=float(t), ratio=r_next,
                                   c0=math.exp(log_c0), width=width, measure_hat=p,
                                   std_error=se, hits=hits, sample_count=mc_count,
                                   seed=seed, halvings=k)
        r_prev = r_next
    raise WidthNotConverged(f"ratio still moving after {max_halvings} halvings")


def sharpness_scan(model, t=2.0, alpha_grid=(1e2, 1e3, 1e4), mc_count=100_000, seed=0,
                   band=(1 / 20, 20.0), direction=None):
    """Calibrate ``c0`` at the smallest ``alpha`` and check every ratio lies
    in ``band``."""
    alphas = sorted(float(a) for a in alpha_grid)
    first = sharpness_experiment(model, t, alphas[0], mc_count=mc_count,
                                 seed=[seed, 0], direction=direction)
    results = [first]
    for k, a in enumerate(alphas[1:], start=1):
        results.append(sharpness_experiment(model, t, a, mc_count=mc_count,
                                            seed=[seed, k], c0=first.c0,
                                            direction=direction))
    rows = []
    for r in results:
        ok = band[0] <= r.ratio <= band[1]
        rows.append({"family_index": 0, "alpha": r.alpha, "measure_hat": r.measure_hat,
                     "std_error": r.std_error, "statistic": r.ratio,
                     "stat_se": r.alpha * math.sqrt(math.log(r.alpha)) * r.std_error,
                     "hits": r.hits, "pass": bool(ok), "c0": r.c0, "width": r.width})
    return ScanReport(
        claim_id="sharpness:alpha*sqrt(log alpha)*gamma{H_t f>c0 alpha}",
        rows=rows, slopes={}, max_statistic=max(r.ratio for r in results),
        passed=all(r["pass"] for r in rows),
        grid=f"t={t:g}, alpha in {tuple(alphas)}, band {band}, c0={first.c0:.4g}")


# -- forbidden zones ---------------------------------------------------------------

def shell_index(model, t, x, u):
    """Shell of each pair: ``0`` for ``|u - D_t x| <= sqrt(t)``, ``m >= 1`` for
    ``2^{m-1} sqrt(t) < |u - D_t x| <= 2^m sqrt(t)``, ``-1`` for local pairs."""
    from .geometry import region_is_global
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.linalg.norm(u - x @ model.d(t).T, axis=-1) / math.sqrt(t)
    with np.errstate(divide="ignore"):
        m = np.where(v <= 1.0, 0, np.ceil(np.log2(np.maximum(v, 1.0))))
    # exact powers of two sit on an outer shell boundary
    m = np.where((v > 1.0) & (2.0 ** (m - 1) >= v), m - 1, m)
    m = np.where((v > 1.0) & (2.0 ** m < v), m + 1, m)
    return np.where(region_is_global(x, u), m, -1).astype(int)


def in_shell(model, t, x, u, m):
    from .geometry import region_is_global
    x = np.asarray(x, dtype=float)
    v = np.linalg.norm(np.asarray(u) - x @ model.d(t).T, axis=-1)
    r = math.sqrt(t)
    inner = v > 2.0 ** (m - 1) * r if m > 0 else np.ones(v.shape, bool)
    return region_is_global(x, u) & inner & (v <= 2.0 ** m * r)


@dataclass
class ForbiddenZoneRun:
    """Output of the covering recursion for one shell index ``m``."""

    alpha: float
    m: int
    A: float
    M: float
    points: np.ndarray
    times: np.ndarray
    tubes: list
    ball_centers: np.ndarray
    ball_radii: np.ndarray
    terminated: bool
    level_set_size: int
    grid_step: float
    checks: dict = field(default_factory=dict)

    @property
    def zone_count(self):
        return len(self.tubes)

    @property
    def passed(self):
        return self.terminated and all(self.checks.values())

    def to_record(self):
        return {"alpha": self.alpha, "m": self.m, "A": self.A, "M": self.M,
                "zones": self.zone_count, "terminated": self.terminated,
                "level_set_size": self.level_set_size, "grid_step": self.grid_step,
                "points": self.points.tolist(), "times": self.times.tolist(),
                "ball_centers": self.ball_centers.tolist(),
                "ball_radii": self.ball_radii.tolist(), "checks": self.checks}


def _masses(model, masses):
    pts = np.array([np.asarray(u, dtype=float) for u, _ in masses]).reshape(-1, model.n)
    wts = np.array([float(w) for _, w in masses])
    if np.any(wts < 0) or not math.isclose(wts.sum(), 1.0, rel_tol=1e-9):
        raise ValueError("point-mass weights must be nonnegative and sum to 1")
    return pts, wts


def annulus_grid(model, alpha, step):
    """Cartesian grid points of spacing ``step`` inside the annulus."""
    half = np.sqrt(4.0 * math.log(alpha) * np.diag(model.Q_inf))
    axes = [np.arange(-h, h + step / 2, step) for h in half]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.n)
    return pts[annulus_membership(model, alpha, pts)]


def shell_level_sup(model, pts, wts, X, m, t_max=1.0, per_decade=100):
    """``sup_t e^{R(x)} t^{-n/2} sum_j w_j chi_{S^m_t}(x, u_j)`` over a log
    grid of ``t`` in ``[1 / (2^{2m} |x|^2), t_max]``.

    Returns ``(log_sup, argmax_t)``; ``-inf`` where no shell is hit.
    """
    n = model.n
    eps = 1.0 / (4.0 ** m * np.sum(X * X, axis=-1))
    lo = float(eps.min())
    if lo >= t_max:
        return np.full(X.shape[0], -np.inf), np.full(X.shape[0], np.nan)
    k = max(2, math.ceil(per_decade * math.log10(t_max / lo)) + 1)
    ts = np.geomspace(lo, t_max, k)
    Rx = quadratic_form_R(model, X)
    best = np.full(X.shape[0], -np.inf)
    arg = np.full(X.shape[0], np.nan)
    D = matrix_family(model, ts).D
    for j, t in enumerate(ts):
        Y = X @ D[j].T
        mass = np.zeros(X.shape[0])
        for u, w in zip(pts, wts):
            r = np.linalg.norm(u - Y, axis=-1) / math.sqrt(t)
            inner = r > 2.0 ** (m - 1) if m > 0 else True
            glob = np.linalg.norm(X - u, axis=-1) > 1.0 / (1.0 + np.linalg.norm(X, axis=-1))
            mass += w * (inner & (r <= 2.0 ** m) & glob)
        with np.errstate(divide="ignore"):
            val = Rx - 0.5 * n * math.log(t) + np.log(mass)
        val = np.where(t >= eps, val, -np.inf)
        better = val > best
        best = np.where(better, val, best)
        arg = np.where(better, t, arg)
    return best, arg


def forbidden_zone_construct(model, masses, alpha, m=0, A=8.0, M=4.0, t_range=None,
                             grid_step=0.02, per_decade=100, max_zones=1000):
    """Greedy covering of the shell-restricted level set by tubes.

    Parameters
    ----------
    masses : sequence of (point, weight)
        ``f dgamma_inf = sum_j w_j delta_{u_j}`` with weights summing to 1.
    alpha : float
        Level of ``sup_t int K^m_t(x, u) f(u) dgamma_inf(u)``.
    m : int
        Shell index.
    A, M : float
        Aperture constant and the time-separation constant recorded with
        each ball pair in the disjointness report.
    t_range : (float or None, float), optional
        Lower cutoff (``None`` for ``1 / (2^{2m} |x|^2)``) and upper end.

    Raises
    ------
    GridTooCoarse
        If the recursion has not exhausted the level set after ``max_zones``
        zones.
    """
    if m < 0:
        raise ValueError("shell index must be nonnegative")
    pts, wts = _masses(model, masses)
    lo, hi = (None, 1.0) if t_range is None else t_range
    X = annulus_grid(model, alpha, grid_step)
    log_sup, t_arg = shell_level_sup(model, pts, wts, X, m, hi, per_decade)
    if lo is not None:
        # cutoff override: recompute with the fixed lower end
        keep = t_arg >= lo
        log_sup = np.where(keep, log_sup, -np.inf)
    level = log_sup >= math.log(alpha)
    L = X[level]
    tl = t_arg[level]
    R_L = quadratic_form_R(model, L)
    remaining = np.ones(L.shape[0], bool)
    chosen, times, tubes = [], [], []
    while remaining.any():
        if len(chosen) >= max_zones:
            raise GridTooCoarse(f"level set not exhausted after {max_zones} zones")
        cand = np.nonzero(remaining)[0]
        i = cand[np.argmin(R_L[cand])]
        x_l, t_l = L[i], float(tl[i])
        tube = Tube(float(R_L[i]), x_l.copy(), A * 2.0 ** (3 * m) * math.sqrt(t_l))
        inside = tube.contains(model, L[cand])
        remaining[cand[inside]] = False
        remaining[i] = False
        chosen.append(x_l)
        times.append(t_l)
        tubes.append(tube)
    P = np.array(chosen).reshape(-1, model.n)
    T = np.array(times)
    centers = np.einsum("kij,kj->ki", matrix_family(model, T).D, P) if T.size else P
    radii = 2.0 ** m * np.sqrt(T)
    run = ForbiddenZoneRun(alpha=float(alpha), m=int(m), A=float(A), M=float(M),
                           points=P, times=T, tubes=tubes, ball_centers=centers,
                           ball_radii=radii, terminated=True,
                           level_set_size=int(L.shape[0]), grid_step=float(grid_step))
    run.checks = check_zone_run(model, run, L)
    return run


def check_zone_run(model, run, level_points):
    """Disjointness of the balls, ordering of ``R``, exclusion of each point
    from earlier tubes and covering of the level-set grid points."""
    P, c, r = run.points, run.ball_centers, run.ball_radii
    k = P.shape[0]
    dist = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
    iu = np.triu_indices(k, 1)
    disjoint = bool(np.all(dist[iu] > (r[:, None] + r[None, :])[iu]))
    R = quadratic_form_R(model, P) if k else np.zeros(0)
    monotone = bool(np.all(np.diff(R) >= -1e-12))
    outside = all(not np.any(run.tubes[j].contains(model, P[l][None]))
                  for l in range(k) for j in range(l))
    covered = np.zeros(level_points.shape[0], bool)
    for tube in run.tubes:
        covered |= tube.contains(model, level_points)
    for p in P:
        covered |= np.all(level_points == p, axis=-1)
    return {"balls_disjoint": disjoint, "R_nondecreasing": monotone,
            "outside_earlier_zones": bool(outside),
            "level_set_covered": bool(covered.all())}
