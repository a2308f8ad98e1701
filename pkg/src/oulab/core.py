"""The OU model (Q, B) and every matrix-valued object derived from it.

Conventions: ``Q_inf`` is the invariant covariance, ``Q_t`` the covariance of
the transition law at time ``t``, ``D_t = Q_inf exp(-t B^T) Q_inf^{-1}`` the
one-parameter group attached to the kernel, and ``R(x) = <Q_inf^{-1} x, x>/2``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (DriftNotStable, NegativeTimeUnsupportedRoute, NotPositiveDefinite,
                     NotSymmetric, NumericalError, TimeNonpositive)
from .linalg import (lyapunov_residual, matrix_exp, matrix_expm1, solve_lyapunov,
                     spd_cholesky, symmetrize)
from .reports import LOWER, TWO_SIDED, UPPER, assess_ratios

SYMMETRY_TOL = 1e-12
STABILITY_MARGIN = 1e-9
LYAPUNOV_RTOL = 1e-10
MIN_TIME = 1e-10

ROUTES = ("definition", "lemma_i", "lemma_ii")


class MatrixFamilyCache:
    """Memoized ``t``-indexed matrices of one model.

    Keys are the exact float value of ``t`` (no rounding), so a cached value is
    the very array a fresh computation returns. Safe for concurrent use.
    """

    def __init__(self):
        self._store = {}
        self._lock = threading.Lock()

    def get(self, name, t, compute):
        key = (name, float(t))
        with self._lock:
            hit = self._store.get(key)
        if hit is not None:
            return hit
        value = compute()
        value.setflags(write=False)
        with self._lock:
            return self._store.setdefault(key, value)

    def clear(self):
        with self._lock:
            self._store.clear()

    def __len__(self):
        return len(self._store)


@dataclass(frozen=True, eq=False)
class OUModel:
    """Validated pair ``(Q, B)``; build through :func:`build_model`."""

    Q: np.ndarray
    B: np.ndarray
    Q_inf: np.ndarray
    Q_inf_inv: np.ndarray
    chol_Q_inf: np.ndarray
    trace_B: float
    spectral_abscissa: float
    cache: MatrixFamilyCache = field(default_factory=MatrixFamilyCache, repr=False)

    @property
    def n(self):
        return self.Q.shape[0]

    # -- time-indexed families -------------------------------------------------
    def expm(self, t):
        return self.cache.get("expB", t, lambda: matrix_exp(self.B, t))

    def expm_T(self, t):
        return self.cache.get("expBT", t, lambda: matrix_exp(self.B.T, t))

    def expm1(self, t):
        """``exp(tB) - I``, accurate for small ``t``."""
        return self.cache.get("expm1B", t, lambda: matrix_expm1(self.B, t))

    def tail(self, t):
        """``Q_inf - Q_t = exp(tB) Q_inf exp(tB^T)``."""
        def compute():
            E = self.expm(t)
            return symmetrize(E @ self.Q_inf @ E.T)
        return self.cache.get("tail", t, compute)

    def qt(self, t):
        if math.isinf(t):
            return self.Q_inf
        _check_time(t)
        def compute():
            Qt = _qt_from_expm1(self.expm1(t), self.Q_inf)
            spd_cholesky(Qt, f"Q_t at t={t:g}")
            return Qt
        return self.cache.get("Qt", t, compute)

    def qt_inv(self, t):
        if math.isinf(t):
            return self.Q_inf_inv
        return self.cache.get("Qt_inv", t, lambda: symmetrize(np.linalg.inv(self.qt(t))))

    def chol_qt(self, t):
        if math.isinf(t):
            return self.chol_Q_inf
        return self.cache.get("chol_Qt", t, lambda: spd_cholesky(self.qt(t)))

    def precision_gap(self, t):
        """``Q_t^{-1} - Q_inf^{-1} = Q_t^{-1} (Q_inf - Q_t) Q_inf^{-1}``.

        Built from the tail matrix so nothing cancels at large ``t``.
        """
        _check_time(t)
        return self.cache.get(
            "gap", t,
            lambda: symmetrize(self.qt_inv(t) @ self.tail(t) @ self.Q_inf_inv))

    def d(self, t):
        """``D_t`` for any real ``t`` (group form)."""
        return self.cache.get(
            "D", t, lambda: self.Q_inf @ self.expm_T(-t) @ self.Q_inf_inv)


@dataclass(frozen=True)
class MatrixFamily:
    """Stacked time-indexed matrices for an array of times (uncached)."""

    t: np.ndarray
    expB: np.ndarray
    D: np.ndarray
    Qt: np.ndarray
    Qt_inv: np.ndarray
    gap: np.ndarray
    logdet_Qt: np.ndarray
    gap_lift: np.ndarray
    gap_chol: np.ndarray
    factored: np.ndarray
    whiten: np.ndarray

    def gap_quadratic(self, idx, u, x):
        """``<G (u - D_t x), u - D_t x>`` per element, ``G`` the precision gap.

        Where ``factored`` holds the form
        ``|S^{-1/2} (L^T e^{tB^T} Q_inf^{-1} u - L^{-1} x)|^2`` is used; it is
        nonnegative by construction and never forms ``D_t x``, which
        overflows the precision of ``G`` for stiff drifts at large ``t``.
        """
        v = u - np.einsum("kij,kj->ki", self.D[idx], x)
        out = np.einsum("ki,kij,kj->k", v, self.gap[idx], v)
        fac = self.factored[idx]
        if np.any(fac):
            k = idx[fac]
            y = (np.einsum("kij,kj->ki", self.gap_lift[k], u[fac])
                 - x[fac] @ self.whiten.T)
            z = np.linalg.solve(self.gap_chol[k], y[..., None])[..., 0]
            out[fac] = np.sum(z * z, axis=1)
        return out


# below this eigenvalue of S the direct form of the precision gap is used
FACTOR_MIN_EIG = 1e-2


def matrix_family(model, t):
    """Batched ``exp(tB)``, ``D_t``, ``Q_t``, ``Q_t^{-1}``, precision gap and
    ``log det Q_t`` for a 1-d array of positive finite times.

    Also holds the factorization ``G = Q_inf^{-1} M S^{-1} M^T Q_inf^{-1}``
    of the gap with ``M = e^{tB} L``, ``L = chol(Q_inf)`` and
    ``S = I - M^T Q_inf^{-1} M``, kept where ``S`` is well conditioned.
    """
    t = np.asarray(t, dtype=float).ravel()
    for s in (t.min(), t.max()) if t.size else ():
        _check_time(s)
    E = matrix_exp(model.B, t)
    D = model.Q_inf @ matrix_exp(model.B.T, -t) @ model.Q_inf_inv
    tail = symmetrize(E @ model.Q_inf @ np.swapaxes(E, -1, -2))
    Qt = _qt_from_expm1(matrix_expm1(model.B, t), model.Q_inf)
    L = spd_cholesky(Qt, "Q_t")
    Qt_inv = symmetrize(np.linalg.inv(Qt))
    gap = symmetrize(Qt_inv @ tail @ model.Q_inf_inv)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    C = model.chol_Q_inf
    lift = C.T @ np.swapaxes(E, -1, -2) @ model.Q_inf_inv
    S = symmetrize(np.eye(model.n) - lift @ E @ C)
    factored = np.linalg.eigvalsh(S)[..., 0] >= FACTOR_MIN_EIG
    S_chol = np.broadcast_to(np.eye(model.n), S.shape).copy()
    if np.any(factored):
        S_chol[factored] = np.linalg.cholesky(S[factored])
    return MatrixFamily(t, E, D, Qt, Qt_inv, gap, logdet, lift, S_chol, factored,
                        np.linalg.inv(C))


def _qt_from_expm1(F, Q_inf):
    """``Q_inf - e^{tB} Q_inf e^{tB^T}`` written with ``F = e^{tB} - I`` so the
    leading terms do not cancel at small ``t``."""
    FQ = F @ Q_inf
    return -symmetrize(2.0 * FQ + FQ @ np.swapaxes(F, -1, -2))


def _check_time(t):
    if not t > 0:
        raise TimeNonpositive(f"t must be positive, got {t!r}")
    if t < MIN_TIME:
        raise NotPositiveDefinite(
            f"t={t:g} is below the resolvable scale {MIN_TIME:g}")


def build_model(Q, B):
    """Validate ``(Q, B)`` and solve for the invariant covariance.

    Raises
    ------
    NotSymmetric, NotPositiveDefinite, DriftNotStable, LyapunovSingular
    """
    Q = np.array(Q, dtype=float, ndmin=2)
    B = np.array(B, dtype=float, ndmin=2)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError("Q must be a square matrix")
    if B.shape != Q.shape:
        raise ValueError(f"B has shape {B.shape}, expected {Q.shape}")
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(B))):
        raise ValueError("Q and B must be finite")
    if np.max(np.abs(Q - Q.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(Q))):
        raise NotSymmetric("Q is not symmetric")
    Q = symmetrize(Q)
    spd_cholesky(Q, "Q")
    abscissa = float(np.max(np.linalg.eigvals(B).real))
    if abscissa >= -STABILITY_MARGIN:
        raise DriftNotStable(
            f"B has spectral abscissa {abscissa:.3e}; need all Re(lambda) < 0")
    Q_inf = solve_lyapunov(B, Q, rtol=LYAPUNOV_RTOL)
    chol = spd_cholesky(Q_inf, "Q_inf")
    Q_inf_inv = symmetrize(np.linalg.inv(Q_inf))
    for a in (Q, B, Q_inf, Q_inf_inv, chol):
        a.setflags(write=False)
    return OUModel(Q=Q, B=B, Q_inf=Q_inf, Q_inf_inv=Q_inf_inv, chol_Q_inf=chol,
                   trace_B=float(np.trace(B)), spectral_abscissa=abscissa)


def lyapunov_residual_of(model):
    return lyapunov_residual(model.B, model.Q, model.Q_inf)


def covariance_qt(model, t):
    """``Q_t`` for ``t`` in ``(0, inf]``."""
    return model.qt(t)


def drift_dt(model, t, route="lemma_i"):
    """``D_t`` by one of three algebraically equivalent routes.

    ``definition``: ``(Q_t^{-1} - Q_inf^{-1})^{-1} Q_t^{-1} exp(tB)``;
    ``lemma_i``: ``Q_inf exp(-tB^T) Q_inf^{-1}`` (any real ``t``);
    ``lemma_ii``: ``exp(tB) + Q_t exp(-tB^T) Q_inf^{-1}``.
    """
    if route == "lemma_i":
        return model.d(t)
    if route not in ROUTES:
        raise ValueError(f"unknown route {route!r}")
    if not t > 0:
        raise NegativeTimeUnsupportedRoute(f"route {route!r} needs t > 0")
    if route == "definition":
        # accuracy degrades with cond(Q_t^{-1} - Q_inf^{-1}), which grows
        # with the spread of the spectrum of B times t
        rhs = np.linalg.solve(model.qt(t), model.expm(t))
        try:
            return np.linalg.solve(model.precision_gap(t), rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"precision gap is singular at t={t:g}") from exc
    return model.expm(t) + model.qt(t) @ model.expm_T(-t) @ model.Q_inf_inv


def quadratic_form_R(model, x):
    """``R(x) = <Q_inf^{-1} x, x> / 2``, vectorized over leading axes."""
    x = np.asarray(x, dtype=float)
    return 0.5 * np.einsum("...i,ij,...j->...", x, model.Q_inf_inv, x)


def grad_R(model, x):
    return np.asarray(x, dtype=float) @ model.Q_inf_inv


@dataclass(frozen=True, eq=False)
class GaussianMeasure:
    """Centered Gaussian with the given covariance."""

    covariance: np.ndarray
    covariance_chol: np.ndarray
    log_norm_const: float

    @property
    def n(self):
        return self.covariance.shape[0]

    @classmethod
    def from_covariance(cls, cov):
        cov = symmetrize(np.asarray(cov, dtype=float))
        L = spd_cholesky(cov, "covariance")
        n = cov.shape[0]
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return cls(cov, L, -0.5 * n * math.log(2 * math.pi) - 0.5 * logdet)

    def mahalanobis2(self, y):
        """``<cov^{-1} y, y>`` using the Cholesky factor."""
        y = np.asarray(y, dtype=float)
        flat = y.reshape(-1, self.n)
        z = np.linalg.solve(self.covariance_chol, flat.T)
        return np.sum(z * z, axis=0).reshape(y.shape[:-1])

    def log_density(self, y):
        return self.log_norm_const - 0.5 * self.mahalanobis2(y)

    def density(self, y):
        return np.exp(self.log_density(y))

    def sample(self, count, seed=None):
        return gaussian_sample(self, count, seed)


def gaussian_measure(model, t=math.inf):
    return GaussianMeasure.from_covariance(model.qt(t))


def gaussian_sample(measure, count, seed=None):
    """``count`` draws ``y = L z`` with ``z`` standard normal."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, measure.n))
    return z @ measure.covariance_chol.T


# -- estimates on Q_t and D_t --------------------------------------------------

def default_rates(model):
    """Exponential rates ``(c, C)`` used by the growth/decay claims.

    ``c`` is half the slowest decay rate of ``exp(sB)`` and ``C`` one and a half
    times the fastest; both bracket the true rates strictly so polynomial
    (Jordan) factors do not register as drift.
    """
    re = -np.linalg.eigvals(model.B).real
    return 0.5 * float(re.min()), 1.5 * float(re.max())


def _opnorm(M):
    return np.linalg.norm(M, 2, axis=(-2, -1))


def check_matrix_estimates(model, t_grid=None, directions=256, seed=0):
    """Fitted-constant reports for the growth and size estimates on D_s, Q_t.

    Returns a list of :class:`~oulab.reports.KernelBoundReport`.
    """
    if t_grid is None:
        # reach the slowest relaxation time (never below t = 20) while keeping
        # exp(C t) inside floating range
        slow = -model.spectral_abscissa
        _, C = default_rates(model)
        t_lo = 1e-2 / max(1.0, float(np.linalg.norm(model.B, 2)))
        t_grid = np.geomspace(t_lo, min(max(20.0, 10.0 / slow), 300.0 / C), 61)
    t_grid = np.asarray(t_grid, dtype=float)
    n = model.n
    c, C = default_rates(model)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((directions, n))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    grid = f"t in [{t_grid.min():g}, {t_grid.max():g}], {t_grid.size} points"

    Qt = np.stack([model.qt(t) for t in t_grid])
    Qt_inv = np.stack([model.qt_inv(t) for t in t_grid])
    tail = np.stack([model.tail(t) for t in t_grid])
    gap = np.stack([model.precision_gap(t) for t in t_grid])
    m1 = np.minimum(1.0, t_grid)
    reports = []

    def per_t(claim, log_ratio, kind):
        reports.append(assess_ratios(claim, log_ratio, scale=t_grid, kind=kind, grid=grid))

    per_t("qt-det:det_Qt/min(1,t)^n",
          np.linalg.slogdet(Qt)[1] - n * np.log(m1), TWO_SIDED)
    per_t("qt-inverse:|Qt^-1|*min(1,t)",
          np.log(_opnorm(Qt_inv)) + np.log(m1), TWO_SIDED)
    per_t("qt-tail:|Qinf-Qt|*exp(ct)",
          np.log(_opnorm(tail)) + c * t_grid, UPPER)
    per_t("precision-gap:|Qt^-1-Qinf^-1|*t*exp(ct)",
          np.log(_opnorm(gap)) + np.log(t_grid) + c * t_grid, UPPER)
    gap_eig_min = np.linalg.eigvalsh(gap)[:, 0]
    per_t("precision-gap-root:|(Qt^-1-Qinf^-1)^-1/2|*t^-1/2*exp(-Ct)",
          -0.5 * np.log(gap_eig_min) - 0.5 * np.log(t_grid) - C * t_grid, UPPER)

    # growth of D_s, D_-s and of exp(-sB), exp(-sB^T) over random unit vectors
    families = {
        "D": lambda s: model.d(s),
        "exp(-sB)": lambda s: model.expm(-s),
        "exp(-sB^T)": lambda s: model.expm_T(-s),
    }
    for name, mat in families.items():
        fwd = np.stack([np.linalg.norm(X @ mat(s).T, axis=1) for s in t_grid])
        inv_name = {"D": "D_-s", "exp(-sB)": "exp(sB)", "exp(-sB^T)": "exp(sB^T)"}[name]
        bwd = np.stack([np.linalg.norm(X @ mat(-s).T, axis=1) for s in t_grid])
        S = np.repeat(t_grid[:, None], directions, axis=1)
        logf = np.log(fwd)
        logb = np.log(bwd)
        reports.append(assess_ratios(f"flow-growth:{name} lower |.x|/(e^(cs)|x|)",
                                     logf - c * S, scale=S, kind=LOWER, grid=grid))
        reports.append(assess_ratios(f"flow-growth:{name} upper |.x|/(e^(Cs)|x|)",
                                     logf - C * S, scale=S, kind=UPPER, grid=grid))
        reports.append(assess_ratios(f"flow-growth:{inv_name} lower |.x|/(e^(-Cs)|x|)",
                                     logb + C * S, scale=S, kind=LOWER, grid=grid))
        reports.append(assess_ratios(f"flow-growth:{inv_name} upper |.x|/(e^(-cs)|x|)",
                                     logb + c * S, scale=S, kind=UPPER, grid=grid))

    large = t_grid >= 1.0
    if np.any(large):
        rq = []
        for t in t_grid[large]:
            W = X @ model.d(t).T
            rq.append(np.einsum("ki,ij,kj->k", W, model.precision_gap(t), W))
        rq = np.stack(rq)
        S = np.repeat(t_grid[large][:, None], directions, axis=1)
        reports.append(assess_ratios(
            "gap-along-flow:<(Qt^-1-Qinf^-1)D_t w,D_t w>/|w|^2", np.log(rq), scale=S,
            kind=TWO_SIDED, open_ends=("high",),
            grid=f"t in [{t_grid[large].min():g}, {t_grid.max():g}]"))
    return reports
