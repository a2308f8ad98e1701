"""Fitted-constant reports for inequalities that hold up to unspecified constants.

A claim ``a <~ b`` (or ``a >~ b``, or both) is checked by evaluating the ratio
``a / b`` over a sample and fitting the constants as its extremes. The claim
passes when the relevant extremes are positive and finite and the extreme
envelope does not drift at the ends of the sampled scale by more than
``slope_tol`` in log-log units.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

SLOPE_TOL = 0.1

TWO_SIDED = "two-sided"
UPPER = "upper"
LOWER = "lower"


@dataclass
class KernelBoundReport:
    claim_id: str
    sample_count: int
    fitted_c: float
    fitted_C: float
    min_ratio: float
    max_ratio: float
    passed: bool
    grid: str = ""
    kind: str = TWO_SIDED
    end_slopes: dict = field(default_factory=dict)
    extremal: dict = field(default_factory=dict)

    def to_record(self):
        rec = asdict(self)
        rec["extremal"] = {k: np.asarray(v).tolist() for k, v in self.extremal.items()}
        return rec


@dataclass
class IdentityCheck:
    """Worst relative error of an identity that should hold to rounding."""

    claim_id: str
    sample_count: int
    max_error: float
    tol: float
    passed: bool

    def to_record(self):
        return asdict(self)


def identity_check(claim_id, errors, tol):
    errors = np.asarray(errors, dtype=float).ravel()
    worst = float(np.max(errors)) if errors.size else 0.0
    return IdentityCheck(claim_id, int(errors.size), worst, tol,
                         bool(np.isfinite(worst) and worst <= tol))


def relative_error(a, b, axis=None):
    """``|a - b| / |b|`` with norms taken over ``axis`` (Frobenius by default)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    num = np.linalg.norm(np.atleast_1d(a - b), axis=axis)
    den = np.linalg.norm(np.atleast_1d(b), axis=axis)
    return num / np.maximum(den, np.finfo(float).tiny)


def _envelope(log_scale, log_ratio, reducer, n_bins):
    uniq = np.unique(log_scale)
    if uniq.size <= n_bins:
        centers = uniq
        vals = np.array([reducer(log_ratio[log_scale == u]) for u in uniq])
        return centers, vals
    edges = np.linspace(log_scale.min(), log_scale.max(), n_bins + 1)
    idx = np.clip(np.searchsorted(edges, log_scale, side="right") - 1, 0, n_bins - 1)
    centers, vals = [], []
    for b in range(n_bins):
        sel = idx == b
        if np.any(sel):
            centers.append(0.5 * (edges[b] + edges[b + 1]))
            vals.append(reducer(log_ratio[sel]))
    return np.array(centers), np.array(vals)


def _end_slopes(centers, vals, width=np.log(10.0)):
    """Least-squares slopes over the first and last decade of the scale."""
    if centers.size < 2:
        return 0.0, 0.0

    def slope(x, y):
        ok = np.isfinite(y)
        if ok.sum() < 2 or np.ptp(x[ok]) == 0:
            return 0.0
        return float(np.polyfit(x[ok], y[ok], 1)[0])

    first = centers <= centers[0] + width
    last = centers >= centers[-1] - width
    if first.sum() < 2:
        first[:2] = True
    if last.sum() < 2:
        last[-2:] = True
    return slope(centers[first], vals[first]), slope(centers[last], vals[last])


def assess_ratios(claim_id, log_ratio, scale=None, kind=TWO_SIDED, grid="",
                  slope_tol=SLOPE_TOL, n_bins=12, extremal=None,
                  open_ends=("low", "high")):
    """Build a :class:`KernelBoundReport` from per-sample log-ratios.

    ``scale`` (positive, same length) is the variable along which drift of the
    extremes is tested, e.g. ``t`` or ``alpha``; ``None`` skips the test.
    ``open_ends`` names the ends of the scale that are asymptotic (``t -> 0``,
    ``t -> inf``); a finite domain edge such as ``t = 1`` is not tested.
    """
    lr = np.asarray(log_ratio, dtype=float).ravel()
    lo = float(np.min(lr)) if lr.size else np.nan
    hi = float(np.max(lr)) if lr.size else np.nan
    need_hi = kind in (TWO_SIDED, UPPER)
    need_lo = kind in (TWO_SIDED, LOWER)
    ok = lr.size > 0 and not np.any(np.isnan(lr))
    if need_hi:
        ok &= bool(np.isfinite(hi))
    if need_lo:
        ok &= bool(np.isfinite(lo))

    slopes = {}
    if scale is not None and lr.size:
        ls = np.log(np.asarray(scale, dtype=float).ravel())
        if need_hi:
            c, v = _envelope(ls, lr, np.max, n_bins)
            s_lo, s_hi = _end_slopes(c, v)
            slopes["upper_envelope"] = (s_lo, s_hi)
            # the upper envelope must not blow up at an asymptotic end
            if "high" in open_ends:
                ok &= s_hi <= slope_tol
            if "low" in open_ends:
                ok &= s_lo >= -slope_tol
        if need_lo:
            c, v = _envelope(ls, lr, np.min, n_bins)
            s_lo, s_hi = _end_slopes(c, v)
            slopes["lower_envelope"] = (s_lo, s_hi)
            if "high" in open_ends:
                ok &= s_hi >= -slope_tol
            if "low" in open_ends:
                ok &= s_lo <= slope_tol

    with np.errstate(over="ignore", under="ignore"):
        return KernelBoundReport(
            claim_id=claim_id, sample_count=int(lr.size),
            fitted_c=float(np.exp(lo)), fitted_C=float(np.exp(hi)),
            min_ratio=float(np.exp(lo)), max_ratio=float(np.exp(hi)),
            passed=bool(ok), grid=grid, kind=kind, end_slopes=slopes,
            extremal=extremal or {})


def fitted_decay_rate(t, values):
    """Least-squares fit ``log values = a - c t``; returns ``(c, r_squared)``."""
    t = np.asarray(t, dtype=float)
    y = np.log(np.asarray(values, dtype=float))
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(-slope), float(r2)
