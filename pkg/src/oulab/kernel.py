"""Mehler kernel, routes to ``H_t f`` and checkers for the kernel bounds.

The kernel is always handled through its logarithm

    log K_t(x, u) = log_det_ratio + R(x) - <(Q_t^{-1} - Q_inf^{-1}) v, v> / 2,
    v = u - D_t x,

because ``R(x)`` reaches several hundred in level-set scans.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .core import (GaussianMeasure, gaussian_measure, matrix_family,
                   quadratic_form_R)
from .linalg import matrix_exp
from .geometry import region_is_global
from .errors import QuadratureNotConverged, TimeNonpositive
from .quadrature import (ball_order_sequence, ball_rule, check_tensor_dim,
                         hermite_rule, order_sequence)
from .reports import LOWER, TWO_SIDED, UPPER, assess_ratios

QUAD_RTOL = 1e-6
LOG_2PI = math.log(2 * math.pi)


# -- kernel ------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelEval:
    """``log K_t(x, u)`` and its three additive pieces (arrays broadcast over
    the leading axes of ``x`` and ``u``)."""

    log_value: np.ndarray
    t: object
    x: np.ndarray
    u: np.ndarray
    log_det_ratio: np.ndarray
    R_x: np.ndarray
    quad_term: np.ndarray

    @property
    def value(self):
        with np.errstate(over="ignore"):
            return np.exp(self.log_value)


def _time_family(model, t):
    """Matrix family over the unique ``t`` and the index of each element."""
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise TimeNonpositive("kernel needs t > 0")
    uniq, inv = np.unique(t.ravel(), return_inverse=True)
    return matrix_family(model, uniq), inv.reshape(t.shape)


def _d_stack(model, t):
    t = np.asarray(t, dtype=float)
    return model.Q_inf @ matrix_exp(model.B.T, -t) @ model.Q_inf_inv


def mehler_log_kernel(model, t, x, u):
    """Evaluate ``log K_t(x, u)``.

    ``t`` may be a scalar or an array broadcastable against the leading axes
    of ``x`` and ``u``.

    Raises
    ------
    TimeNonpositive
        If any ``t <= 0``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    t_arr = np.asarray(t, dtype=float)
    fam, idx = _time_family(model, t_arr)
    logdet_inf = 2.0 * np.sum(np.log(np.diag(model.chol_Q_inf)))
    shape = np.broadcast_shapes(t_arr.shape, x.shape[:-1], u.shape[:-1])
    n = model.n
    idx = np.broadcast_to(idx, shape)
    quad = -0.5 * fam.gap_quadratic(idx.ravel(),
                                    np.broadcast_to(u, shape + (n,)).reshape(-1, n),
                                    np.broadcast_to(x, shape + (n,)).reshape(-1, n))
    quad = quad.reshape(shape)
    log_det_ratio = 0.5 * (logdet_inf - fam.logdet_Qt[idx])
    Rx = np.broadcast_to(quadratic_form_R(model, x), shape)
    return KernelEval(log_value=log_det_ratio + Rx + quad, t=t, x=x, u=u,
                      log_det_ratio=log_det_ratio, R_x=Rx, quad_term=quad)


# -- test functions ---------------------------------------------------------------

class TestFunction:
    """A function on R^n with a cached ``L^1(gamma_inf)`` norm."""

    __test__ = False  # not a pytest class
    kind = "generic"
    sup_bound = math.inf

    def __init__(self):
        self._l1 = weakref.WeakKeyDictionary()

    def __call__(self, u):
        raise NotImplementedError

    gaussian_factor = None  # (center, width) of a Gaussian envelope, if any

    def l1_norm(self, model):
        try:
            return self._l1[model]
        except KeyError:
            val = float(self._compute_l1(model))
            self._l1[model] = val
            return val

    def _compute_l1(self, model):
        raise NotImplementedError

    def describe(self):
        return {"kind": self.kind}


class GaussianBump(TestFunction):
    """``f(u) = exp(log_scale - |u - center|^2 / (2 width^2))``."""

    kind = "gaussian_bump"

    def __init__(self, center, width, scale=1.0, log_scale=None):
        super().__init__()
        self.center = np.asarray(center, dtype=float).ravel()
        self.width = float(width)
        if not self.width > 0:
            raise ValueError("width must be positive")
        self.log_scale = math.log(scale) if log_scale is None else float(log_scale)

    @property
    def n(self):
        return self.center.size

    @property
    def gaussian_factor(self):
        return self.center, self.width

    @property
    def sup_bound(self):
        return math.exp(self.log_scale) if self.log_scale < 709.0 else math.inf

    def log_eval(self, u):
        d = np.asarray(u, dtype=float) - self.center
        return self.log_scale - 0.5 * np.sum(d * d, axis=-1) / self.width ** 2

    def __call__(self, u):
        return np.exp(self.log_eval(u))

    def log_mass_against(self, mean, cov):
        """``log int f dN(mean, cov)`` in closed form."""
        w2 = self.width ** 2
        g = GaussianMeasure.from_covariance(cov + w2 * np.eye(self.n))
        return (self.log_scale + 0.5 * self.n * (LOG_2PI + math.log(w2))
                + g.log_density(self.center - mean))

    def _compute_l1(self, model):
        return math.exp(self.log_mass_against(np.zeros(self.n), model.Q_inf))

    def describe(self):
        return {"kind": self.kind, "center": self.center.tolist(),
                "width": self.width, "log_scale": self.log_scale}


class DiracApprox(GaussianBump):
    """Narrow Gaussian bump scaled to unit ``L^1(gamma_inf)`` norm.

    ``H_t f(x)`` tends to ``K_t(x, center)`` as ``width -> 0``.
    """

    kind = "dirac_approx"

    def __init__(self, model, center, width):
        super().__init__(center, width, log_scale=0.0)
        self.log_scale = -self.log_mass_against(np.zeros(self.n), model.Q_inf)
        self._l1[model] = 1.0


class IndicatorBall(TestFunction):
    kind = "indicator_ball"
    sup_bound = 1.0

    def __init__(self, center, radius):
        super().__init__()
        self.center = np.asarray(center, dtype=float).ravel()
        self.radius = float(radius)
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def n(self):
        return self.center.size

    def __call__(self, u):
        d = np.asarray(u, dtype=float) - self.center
        return (np.sum(d * d, axis=-1) <= self.radius ** 2).astype(float)

    def _compute_l1(self, model):
        g = gaussian_measure(model)
        val, _ = _ball_integral(self, lambda U: g.log_density(U)[None], 1)
        return val[0]

    def describe(self):
        return {"kind": self.kind, "center": self.center.tolist(),
                "radius": self.radius}


class Polynomial(TestFunction):
    """``sum_a c_a u^a`` over multi-indices ``a`` of total degree at most 4."""

    kind = "polynomial"
    MAX_DEGREE = 4

    def __init__(self, terms, n=None):
        super().__init__()
        terms = {tuple(int(k) for k in a): float(c) for a, c in dict(terms).items()}
        if not terms:
            raise ValueError("empty polynomial")
        dims = {len(a) for a in terms}
        if len(dims) != 1 or (n is not None and dims != {n}):
            raise ValueError("inconsistent multi-index lengths")
        self.terms = terms
        self.degree = max(sum(a) for a in terms)
        if self.degree > self.MAX_DEGREE or min(min(a) for a in terms) < 0:
            raise ValueError(f"degree must be in [0, {self.MAX_DEGREE}]")
        self._n = dims.pop()
        if self.degree == 0:
            self.sup_bound = abs(sum(terms.values()))

    @classmethod
    def constant(cls, value, n):
        return cls({(0,) * n: value})

    @property
    def n(self):
        return self._n

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        out = np.zeros(u.shape[:-1])
        for a, c in self.terms.items():
            out = out + c * np.prod(u ** np.asarray(a), axis=-1)
        return out

    def _compute_l1(self, model):
        # |p| has kinks on the zero set, so use a fixed high order rather than
        # a convergence loop
        if self.degree == 0:
            return abs(sum(self.terms.values()))
        order = {1: 4000, 2: 400, 3: 100, 4: 40}[self.n]
        Z, W = hermite_rule(self.n, order)
        return float(W @ np.abs(self(Z @ model.chol_Q_inf.T)))

    def describe(self):
        return {"kind": self.kind,
                "terms": {",".join(map(str, a)): c for a, c in self.terms.items()}}


class CallableFunction(TestFunction):
    """Wrap a vectorized callable ``g(u)`` with ``u`` of shape ``(..., n)``."""

    kind = "callable"

    def __init__(self, fn, n, l1=None):
        super().__init__()
        self.fn = fn
        self._n = int(n)
        self._fixed_l1 = l1

    @property
    def n(self):
        return self._n

    def __call__(self, u):
        return np.asarray(self.fn(np.asarray(u, dtype=float)), dtype=float)

    def _compute_l1(self, model):
        if self._fixed_l1 is not None:
            return self._fixed_l1
        Z, W = hermite_rule(self.n, order_sequence(self.n)[-1])
        return float(W @ np.abs(self(Z @ model.chol_Q_inf.T)))


def gaussian_bump(center, width, scale=1.0):
    return GaussianBump(center, width, scale)


def indicator_ball(center, radius):
    return IndicatorBall(center, radius)


def polynomial(terms):
    return Polynomial(terms)


def dirac_approx(model, center, width):
    return DiracApprox(model, center, width)


# -- routes to H_t f --------------------------------------------------------------

ROUTES = ("kolmogorov_quadrature", "kernel_gamma_quadrature", "monte_carlo",
          "gaussian_closed_form")


@dataclass
class SemigroupValue:
    """``H_t f(x)`` with an error estimate (quadrature change or MC s.e.)."""

    value: np.ndarray
    error: np.ndarray
    route: str
    detail: dict = field(default_factory=dict)


def _route_density(model, t, route, X):
    """Return ``(logrho, P, mu)`` for the route's density in ``u``.

    ``logrho(U)`` maps nodes ``(m, N, n)`` to log densities ``(m, N)``;
    ``(P, mu)`` are the precision and per-point mean of that density written
    as a Gaussian, each computed from the route's own formula.
    """
    if route == "kolmogorov_quadrature":
        g = gaussian_measure(model, t)
        mean = X @ model.expm(t).T
        P = model.qt_inv(t)

        def logrho(U):
            return g.log_density(U - mean[:, None, :])
        return logrho, P, mean
    gamma_inf = gaussian_measure(model)
    gap = model.precision_gap(t)
    P = gap + model.Q_inf_inv
    mean = np.linalg.solve(P, (X @ model.d(t).T @ gap).T).T

    def logrho(U):
        k = mehler_log_kernel(model, t, X[:, None, :], U)
        return k.log_value + gamma_inf.log_density(U)
    return logrho, P, mean


def _integrate(f, logrho, nodes_fn, orders, m, rtol, gauss_f):
    prev = None
    for order in orders:
        U, logw = nodes_fn(order)          # (m, N, n), (m, N)
        if gauss_f:
            terms = np.exp(f.log_eval(U) + logrho(U) + logw)
            vals = terms.sum(axis=1)
            absint = vals
        else:
            wr = np.exp(logrho(U) + logw)
            fv = f(U)
            vals = np.sum(fv * wr, axis=1)
            absint = np.sum(np.abs(fv) * wr, axis=1)
        if prev is not None:
            err = np.abs(vals - prev)
            scale = np.maximum(np.abs(vals), absint)
            if np.all(err <= rtol * scale):
                return vals, err, order
        prev = vals
    worst = float(np.max(err / np.maximum(scale, np.finfo(float).tiny)))
    raise QuadratureNotConverged(
        f"relative change {worst:.2e} > {rtol:g} at order {orders[-1]}")


def _gaussian_nodes(n, mean, cov_chol, logdet_cov):
    """Node function for a tensor Hermite rule over ``N(mean_k, cov)``.

    Returns nodes and ``log weight - log nu(u)`` so that
    ``sum exp(logrho + logw) g`` approximates ``int g rho du``.
    """
    def nodes(order):
        Z, W = hermite_rule(n, order)
        U = mean[:, None, :] + Z @ cov_chol.T
        lognu = (-0.5 * n * LOG_2PI - 0.5 * logdet_cov - 0.5 * np.sum(Z * Z, axis=1))
        logw = np.log(W) - lognu
        return U, np.broadcast_to(logw, (mean.shape[0], Z.shape[0]))
    return nodes


def _ball_integral(f, logrho, m, rtol=QUAD_RTOL):
    def nodes(order):
        Y, W = ball_rule(f.n, order)
        U = f.center + f.radius * Y
        logw = np.log(W) + f.n * math.log(f.radius)
        return (np.broadcast_to(U, (m,) + U.shape),
                np.broadcast_to(logw, (m, W.size)))

    ones = CallableFunction(lambda U: np.ones(U.shape[:-1]), f.n)
    vals, err, order = _integrate(ones, logrho, nodes, ball_order_sequence(f.n),
                                  m, rtol, False)
    return vals, (err, order)


def _chunks(m, per_point, budget=2 ** 21):
    step = max(1, budget // max(per_point, 1))
    for a in range(0, m, step):
        yield slice(a, min(m, a + step))


def apply_semigroup(model, t, f, x, route="kolmogorov_quadrature", count=100_000,
                    seed=0, rtol=QUAD_RTOL, nodes="adapted"):
    """Evaluate ``H_t f(x)`` by one of several independent routes.

    Parameters
    ----------
    route : str
        ``kolmogorov_quadrature`` integrates ``f(e^{tB}x - y)`` against
        ``gamma_t``; ``kernel_gamma_quadrature`` integrates ``K_t(x, u) f(u)``
        against ``gamma_inf``; ``monte_carlo`` averages over ``count`` draws
        of ``gamma_t``; ``gaussian_closed_form`` is exact for Gaussian bumps.
    nodes : {"adapted", "invariant"}
        Reference Gaussian of the kernel route. ``adapted`` completes the
        square of the kernel (and of a Gaussian ``f``); ``invariant`` uses
        the nodes of ``gamma_inf`` itself, which only resolves moderate ``t``.

    Returns
    -------
    SemigroupValue
    """
    if not t > 0:
        raise TimeNonpositive("t must be positive")
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    X = x.reshape(-1, model.n)
    m = X.shape[0]

    if route == "monte_carlo":
        y = gaussian_measure(model, t).sample(count, seed)
        mean = X @ model.expm(t).T
        vals = np.empty(m)
        errs = np.empty(m)
        for sl in _chunks(m, count):
            fv = f(mean[sl, None, :] - y[None])
            vals[sl] = fv.mean(axis=1)
            errs[sl] = fv.std(axis=1, ddof=1) / math.sqrt(count)
        return SemigroupValue(vals.reshape(shape), errs.reshape(shape), route,
                              {"count": count, "seed": seed})

    if route == "gaussian_closed_form":
        if f.gaussian_factor is None:
            raise ValueError("closed form needs a Gaussian-family function")
        mean = X @ model.expm(t).T
        vals = np.exp(f.log_mass_against(mean, model.qt(t)))
        return SemigroupValue(vals.reshape(shape), np.zeros(shape), route)

    if route not in ROUTES:
        raise ValueError(f"unknown route {route!r}")
    check_tensor_dim(model.n)
    n = model.n
    vals = np.empty(m)
    errs = np.empty(m)
    used = 0
    if isinstance(f, IndicatorBall):
        for sl in _chunks(m, 2 * ball_order_sequence(n)[-1] ** n):
            logrho, _, _ = _route_density(model, t, route, X[sl])
            vals[sl], (errs[sl], order) = _ball_integral(
                f, logrho, sl.stop - sl.start, rtol)
            used = max(used, order)
        return SemigroupValue(vals.reshape(shape), errs.reshape(shape), route,
                              {"rule": "ball", "order": used})

    if nodes not in ("adapted", "invariant"):
        raise ValueError(f"unknown node policy {nodes!r}")
    invariant = route == "kernel_gamma_quadrature" and nodes == "invariant"
    gauss_f = f.gaussian_factor is not None
    orders = order_sequence(n)
    for sl in _chunks(m, orders[-1] ** n):
        logrho, P_ref, mu_ref = _route_density(model, t, route, X[sl])
        if invariant:
            P_ref, mu_ref = model.Q_inf_inv, np.zeros_like(mu_ref)
        elif gauss_f:
            c, w = f.gaussian_factor
            P_new = P_ref + np.eye(n) / w ** 2
            mu_ref = np.linalg.solve(P_new, (mu_ref @ P_ref + c / w ** 2).T).T
            P_ref = P_new
        cov = np.linalg.inv(P_ref)
        L = np.linalg.cholesky(0.5 * (cov + cov.T))
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        node_fn = _gaussian_nodes(n, mu_ref, L, logdet)
        vals[sl], errs[sl], order = _integrate(
            f, logrho, node_fn, orders, sl.stop - sl.start, rtol, gauss_f)
        used = max(used, order)
    return SemigroupValue(vals.reshape(shape), errs.reshape(shape), route,
                          {"rule": "hermite", "order": used, "nodes": nodes})


def log_gaussian_semigroup(model, f, t, x, route="kernel"):
    """``log H_t f(x)`` in closed form for a Gaussian-family ``f``, batched.

    ``t`` broadcasts against the leading axes of ``x``. ``route="kernel"``
    integrates ``K_t(x, .) f`` against ``gamma_inf`` by completing the square
    in the kernel's own pieces; ``route="kolmogorov"`` convolves ``f`` with
    ``gamma_t`` around ``e^{tB}x``.
    """
    if f.gaussian_factor is None:
        raise ValueError("closed form needs a Gaussian-family function")
    c, w = f.gaussian_factor
    n = model.n
    w2 = w * w
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    shape = np.broadcast_shapes(t.shape, x.shape[:-1])
    uniq, inv = np.unique(np.broadcast_to(t, shape).ravel(), return_inverse=True)
    fam = matrix_family(model, uniq)
    X = np.broadcast_to(x, shape + (n,)).reshape(-1, n)
    eye = np.eye(n)
    if route == "kolmogorov":
        S = fam.Qt + w2 * eye
        S_inv = np.linalg.inv(S)
        logdet = np.linalg.slogdet(S)[1]
        d = c - np.einsum("kij,kj->ki", fam.expB[inv], X)
        q = np.einsum("ki,kij,kj->k", d, S_inv[inv], d)
        out = (f.log_scale + 0.5 * n * math.log(w2) - 0.5 * logdet[inv] - 0.5 * q)
    elif route == "kernel":
        P = fam.gap + model.Q_inf_inv + eye / w2
        P_inv = np.linalg.inv(P)
        logdet_P = np.linalg.slogdet(P)[1]
        # G D_t x = Q_t^{-1} e^{tB} x, free of the growing D_t x
        Ex = np.einsum("kij,kj->ki", fam.expB[inv], X)
        h = np.einsum("kij,kj->ki", fam.Qt_inv[inv], Ex) + c / w2
        yGy = fam.gap_quadratic(inv, np.zeros_like(X), X)
        out = (f.log_scale - 0.5 * (fam.logdet_Qt + logdet_P)[inv]
               + quadratic_form_R(model, X)
               + 0.5 * np.einsum("ki,kij,kj->k", h, P_inv[inv], h)
               - 0.5 * yGy
               - 0.5 * float(c @ c) / w2)
    else:
        raise ValueError(f"unknown route {route!r}")
    return out.reshape(shape)


# -- semigroup law -----------------------------------------------------------------

def semigroup_law_check(model, f, t, s, x, grid_points=41, radius_sd=6.0,
                        rtol=1e-5):
    """Compare ``H_{t+s} f(x)`` with ``H_t (H_s f)(x)``.

    The inner function ``H_s f`` is tabulated on a ``grid_points^n`` grid
    covering ``radius_sd`` standard deviations of ``gamma_inf`` per axis and
    interpolated cubically; outside the box the interpolant extrapolates.

    Returns ``(direct, composed, relative_error)``.
    """
    n = model.n
    sd = np.sqrt(np.diag(model.Q_inf))
    axes = [np.linspace(-radius_sd * v, radius_sd * v, grid_points) for v in sd]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    inner = apply_semigroup(model, s, f, mesh.reshape(-1, n)).value
    interp = RegularGridInterpolator(axes, inner.reshape(mesh.shape[:-1]),
                                     method="cubic", bounds_error=False,
                                     fill_value=None)
    g = CallableFunction(interp, n)
    composed = apply_semigroup(model, t, g, x, rtol=rtol).value
    direct = apply_semigroup(model, t + s, f, x).value
    err = np.abs(composed - direct) / np.maximum(np.abs(direct), np.finfo(float).tiny)
    return direct, composed, err


# -- kernel bound checkers -----------------------------------------------------------

@dataclass(frozen=True)
class SampleSpec:
    """Sampling design for the kernel bound checkers.

    ``x`` is drawn from ``gamma_inf`` with probability ``gamma_fraction`` and
    uniformly from the ball of radius ``ball_radius`` otherwise; ``t`` is
    log-uniform on ``t_range``; ``u = D_t x + sqrt(t) * scale * z`` with the
    scale drawn from ``noise_scales``.
    """

    count: int = 10_000
    t_range: tuple = (1e-6, 1.0)
    ball_radius: float = 8.0
    noise_scales: tuple = (0.1, 1.0, 10.0)
    gamma_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        lo, hi = self.t_range
        if not 0 < lo <= hi:
            raise ValueError("t_range must satisfy 0 < lo <= hi")

    def with_(self, **kw):
        d = dict(self.__dict__)
        d.update(kw)
        return SampleSpec(**d)


def uniform_ball(rng, count, n, radius):
    z = rng.standard_normal((count, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return z * radius * rng.random((count, 1)) ** (1.0 / n)


def draw_points(model, spec, rng, count):
    gam = rng.random(count) < spec.gamma_fraction
    x = uniform_ball(rng, count, model.n, spec.ball_radius)
    x[gam] = rng.standard_normal((int(gam.sum()), model.n)) @ model.chol_Q_inf.T
    return x


def draw_kernel_samples(model, spec, rng=None, count=None, flow=False):
    """Triples ``(t, x, u)`` following ``spec``.

    With ``flow=True`` the perturbation is applied before the flow,
    ``u = D_t (x + scale * z)``, so ``D_{-t} u - x`` stays exact even when
    ``D_t`` is huge.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    count = spec.count if count is None else count
    lo, hi = spec.t_range
    t = np.exp(rng.uniform(math.log(lo), math.log(hi), count))
    x = draw_points(model, spec, rng, count)
    scale = rng.choice(np.asarray(spec.noise_scales, dtype=float), count)
    D = _d_stack(model, t)
    z = rng.standard_normal((count, model.n))
    if flow:
        return t, x, np.einsum("kij,kj->ki", D, x + scale[:, None] * z)
    return t, x, np.einsum("kij,kj->ki", D, x) + (np.sqrt(t) * scale)[:, None] * z


def _filtered_samples(model, spec, keep, max_rounds=200):
    """Draw until ``spec.count`` samples satisfy ``keep(t, x, u)``."""
    rng = np.random.default_rng(spec.seed)
    parts, have = [], 0
    for _ in range(max_rounds):
        t, x, u = draw_kernel_samples(model, spec, rng, count=spec.count)
        sel = keep(t, x, u)
        parts.append((t[sel], x[sel], u[sel]))
        have += int(sel.sum())
        if have >= spec.count:
            break
    t, x, u = (np.concatenate(a)[:spec.count] for a in zip(*parts))
    return t, x, u


def _extremal(t, x, u, lr, pick):
    k = int(pick(lr))
    return {"t": t[k], "x": x[k], "u": u[k]}


def _report(claim, lr, t, x, u, kind, grid, open_ends):
    pick = np.argmax if kind == UPPER else np.argmin
    return assess_ratios(claim, lr, scale=t, kind=kind, grid=grid,
                         extremal=_extremal(t, x, u, lr, pick),
                         open_ends=open_ends)


def _grid_text(spec, extra=""):
    lo, hi = spec.t_range
    return (f"{spec.count} samples, t log-uniform on [{lo:g}, {hi:g}], "
            f"noise {tuple(spec.noise_scales)}, seed {spec.seed}{extra}")


def check_kernel_bounds_small_t(model, sample_spec=None):
    """Reports for the Gaussian sandwich of ``K_t`` when ``0 < t <= 1``.

    The sandwich ``e^R t^{-n/2} e^{-C q} <~ K_t <~ e^R t^{-n/2} e^{-c q}`` with
    ``q = |u - D_t x|^2 / t`` is split into its exponent ratio (giving the
    fitted ``c, C``), its prefactor, and the two assembled inequalities.
    The local-region variant checks
    ``|u - D_t x|^2 / t >= |u - x|^2 / t - C``; its report carries the
    additive quantity itself in place of a log-ratio.

    Returns
    -------
    list of KernelBoundReport
    """
    spec = sample_spec or SampleSpec()
    t, x, u = draw_kernel_samples(model, spec)
    n = model.n
    k = mehler_log_kernel(model, t, x, u)
    v = u - np.einsum("kij,kj->ki", _d_stack(model, t), x)
    q = np.sum(v * v, axis=1) / t
    ok = q > 0
    grid = _grid_text(spec)
    ends = ("low",)
    expo = np.log(-k.quad_term[ok] / q[ok])
    reports = [_report("kernel-small-t:exponent (-quad)/(|u-D_t x|^2/t)", expo,
                       t[ok], x[ok], u[ok], TWO_SIDED, grid, ends)]
    pref = k.log_det_ratio + 0.5 * n * np.log(t)
    reports.append(_report("kernel-small-t:prefactor t^(n/2) sqrt(det Qinf/det Qt)",
                           pref, t, x, u, TWO_SIDED, grid, ends))
    c_fit, C_fit = reports[0].fitted_c, reports[0].fitted_C
    base = k.log_value - k.R_x + 0.5 * n * np.log(t)
    reports.append(_report("kernel-small-t:upper K*t^(n/2)*e^(-R+cq)", base + c_fit * q,
                           t, x, u, UPPER, grid, ends))
    reports.append(_report("kernel-small-t:lower K*t^(n/2)*e^(-R+Cq)", base + C_fit * q,
                           t, x, u, LOWER, grid, ends))

    # local region: u uniform in the ball of radius 1/(1+|x|) around x, and
    # for every other sample the boundary point along D_t x - x, which
    # maximizes the additive quantity over the ball
    rng = np.random.default_rng([spec.seed, 7])
    lo, hi = spec.t_range
    tl = np.exp(rng.uniform(math.log(lo), math.log(hi), spec.count))
    xl = draw_points(model, spec, rng, spec.count)
    rad = 1.0 / (1.0 + np.linalg.norm(xl, axis=1))
    h = uniform_ball(rng, spec.count, n, 1.0)
    Dl = _d_stack(model, tl)
    drift = np.einsum("kij,kj->ki", Dl, xl) - xl
    nd = np.linalg.norm(drift, axis=1, keepdims=True)
    worst = (np.arange(spec.count) % 2 == 1) & (nd[:, 0] > 0)
    h[worst] = drift[worst] / nd[worst]
    ul = xl + h * rad[:, None]
    vl = ul - np.einsum("kij,kj->ki", Dl, xl)
    add = (np.sum((ul - xl) ** 2, axis=1) - np.sum(vl * vl, axis=1)) / tl
    lgrid = _grid_text(spec, ", local region")
    reports.append(_report("kernel-local:additive (|u-x|^2-|u-D_t x|^2)/t", add,
                           tl, xl, ul, UPPER, lgrid, ends))
    kl = mehler_log_kernel(model, tl, xl, ul)
    loc = (kl.log_value - kl.R_x + 0.5 * n * np.log(tl)
           + c_fit * np.sum((ul - xl) ** 2, axis=1) / tl)
    reports.append(_report("kernel-local:K*t^(n/2)*e^(-R+c|u-x|^2/t)", loc,
                           tl, xl, ul, UPPER, lgrid, ends))
    return reports


def check_kernel_bounds_large_t(model, sample_spec=None):
    """Reports for ``e^R e^{-C|w|^2} <~ K_t <~ e^R e^{-c|w|^2}``, ``t >= 1``,
    with ``w = D_{-t} u - x``."""
    spec = sample_spec or SampleSpec(t_range=(1.0, 20.0))
    if spec.t_range[0] < 1.0:
        raise ValueError("large-t checks need t >= 1")
    t, x, u = draw_kernel_samples(model, spec, flow=True)
    k = mehler_log_kernel(model, t, x, u)
    Dm = _d_stack(model, -t)
    w = np.einsum("kij,kj->ki", Dm, u) - x
    w2 = np.sum(w * w, axis=1)
    ok = w2 > 0
    grid = _grid_text(spec)
    ends = ("high",)
    reports = [_report("kernel-large-t:exponent (-quad)/|D_-t u-x|^2",
                       np.log(-k.quad_term[ok] / w2[ok]),
                       t[ok], x[ok], u[ok], TWO_SIDED, grid, ends)]
    reports.append(_report("kernel-large-t:prefactor sqrt(det Qinf/det Qt)",
                           k.log_det_ratio, t, x, u, TWO_SIDED, grid, ends))
    c_fit, C_fit = reports[0].fitted_c, reports[0].fitted_C
    base = k.log_value - k.R_x
    reports.append(_report("kernel-large-t:upper K*e^(-R+c|w|^2)", base + c_fit * w2,
                           t, x, u, UPPER, grid, ends))
    reports.append(_report("kernel-large-t:lower K*e^(-R+C|w|^2)", base + C_fit * w2,
                           t, x, u, LOWER, grid, ends))
    return reports


def check_global_small_t_bound(model, alpha, sample_spec=None):
    """Reports on the global region for ``0 < t <= 1``.

    Checks ``(1+|x|)^{-2} <~ t^2|x|^2 + |u - D_t x|^2`` on ``G`` and
    ``K_t(x, u) <~ alpha`` on ``G`` intersected with ``R(x) < log(alpha)/2``.
    """
    if not alpha > math.e:
        raise ValueError("alpha must exceed e")
    spec = sample_spec or SampleSpec()
    half = 0.5 * math.log(alpha)

    def keep(t, x, u):
        return region_is_global(x, u) & (quadratic_form_R(model, x) < half)

    t, x, u = _filtered_samples(model, spec, keep)
    D = _d_stack(model, t)
    v = u - np.einsum("kij,kj->ki", D, x)
    nx = np.linalg.norm(x, axis=1)
    lhs = np.log(t ** 2 * nx ** 2 + np.sum(v * v, axis=1)) + 2 * np.log1p(nx)
    grid = _grid_text(spec, f", global region, R(x) < {half:.4g}")
    reports = [_report("global-separation:(t^2|x|^2+|u-D_t x|^2)(1+|x|)^2", lhs,
                       t, x, u, LOWER, grid, ("low",))]
    k = mehler_log_kernel(model, t, x, u)
    reports.append(_report(f"global-kernel:K/alpha (alpha={alpha:g})",
                           k.log_value - math.log(alpha), t, x, u, UPPER,
                           grid, ("low",)))
    return reports
