"""Exact simulation of the OU process and a Monte Carlo route to ``H_t f``.

Every step draws from the exact transition law
``X_{t+h} | X_t ~ N(e^{hB} X_t, Q_h)``, so there is no discretization bias
and the step size only affects cost.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import covariance_qt

CHUNK = 2 ** 16  # paths per seed block; fixed so results do not depend on workers


@dataclass(frozen=True)
class PathSpec:
    """Start point, horizon ``T = k h`` and Monte Carlo budget.

    ``x0="stationary"`` starts every path from an independent draw of
    ``gamma_inf``.
    """

    x0: object
    horizon: float
    step: float
    path_count: int
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.step <= 1:
            raise ValueError("step must lie in (0, 1]")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        k = self.horizon / self.step
        if abs(k - round(k)) > 1e-9 * max(1.0, k):
            raise ValueError("horizon must be an integer multiple of step")
        if self.path_count < 1:
            raise ValueError("path_count must be at least 1")

    @property
    def steps(self):
        return int(round(self.horizon / self.step))


@dataclass
class RunningMoments:
    """Streaming mean and scatter matrix with the pairwise merge rule."""

    count: int = 0
    mean: np.ndarray = None
    scatter: np.ndarray = None

    @classmethod
    def of(cls, X):
        mu = X.mean(axis=0)
        d = X - mu
        return cls(X.shape[0], mu, d.T @ d)

    def merge(self, other):
        if self.count == 0:
            return other
        if other.count == 0:
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        scatter = (self.scatter + other.scatter
                   + np.outer(delta, delta) * (self.count * other.count / n))
        return RunningMoments(n, mean, scatter)

    @property
    def cov(self):
        return self.scatter / (self.count - 1)


@dataclass
class SimulationResult:
    spec: PathSpec
    terminal: np.ndarray
    moments: RunningMoments
    paths: np.ndarray = None
    detail: dict = field(default_factory=dict)

    @property
    def mean(self):
        return self.moments.mean

    @property
    def cov(self):
        return self.moments.cov

    def mean_std_error(self):
        return np.sqrt(np.diag(self.cov) / self.moments.count)

    def cov_std_error(self):
        """Gaussian-theory standard error of each covariance entry."""
        S = self.cov
        d = np.diag(S)
        return np.sqrt((np.outer(d, d) + S ** 2) / self.moments.count)


def _start(model, spec, count, rng):
    if isinstance(spec.x0, str):
        if spec.x0 != "stationary":
            raise ValueError(f"unknown start {spec.x0!r}")
        return rng.standard_normal((count, model.n)) @ model.chol_Q_inf.T
    x0 = np.asarray(spec.x0, dtype=float).ravel()
    if x0.size != model.n:
        raise ValueError("x0 has the wrong dimension")
    return np.broadcast_to(x0, (count, model.n)).copy()


def _block(model, spec, b, count, keep_paths):
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(b,)))
    E = model.expm(spec.step)
    L = np.linalg.cholesky(covariance_qt(model, spec.step))
    X = _start(model, spec, count, rng)
    path = [X.copy()] if keep_paths else None
    for _ in range(spec.steps):
        X = X @ E.T + rng.standard_normal((count, model.n)) @ L.T
        if keep_paths:
            path.append(X.copy())
    return X, (np.stack(path, axis=1) if keep_paths else None)


def simulate_exact(model, spec, keep_paths=False, workers=1):
    """Simulate ``spec.path_count`` paths with exact Gaussian steps.

    Paths are generated in fixed blocks of ``CHUNK`` with block ``b`` seeded
    by ``SeedSequence(seed, spawn_key=(b,))``, so the output is identical for
    any worker count. Moments are merged block by block.
    """
    counts = [min(CHUNK, spec.path_count - a) for a in range(0, spec.path_count, CHUNK)]

    def run(b):
        return _block(model, spec, b, counts[b], keep_paths)

    if workers and workers > 1 and len(counts) > 1:
        with ThreadPoolExecutor(workers) as ex:
            blocks = list(ex.map(run, range(len(counts))))
    else:
        blocks = [run(b) for b in range(len(counts))]
    moments = RunningMoments()
    for X, _ in blocks:
        moments = moments.merge(RunningMoments.of(X))
    terminal = np.concatenate([X for X, _ in blocks])
    paths = np.concatenate([p for _, p in blocks]) if keep_paths else None
    return SimulationResult(spec, terminal, moments, paths,
                            {"blocks": len(counts), "steps": spec.steps})


def write_paths(result, fh, delimiter="\t"):
    """One record per (path, step): ``path, step, t, x_1..x_n``."""
    P = result.paths
    if P is None:
        raise ValueError("simulation was run without keep_paths")
    n = P.shape[-1]
    fh.write(delimiter.join(["path", "step", "t"] + [f"x{i + 1}" for i in range(n)]) + "\n")
    h = result.spec.step
    for p in range(P.shape[0]):
        for s in range(P.shape[1]):
            fh.write(delimiter.join([str(p), str(s), repr(s * h)]
                                    + [repr(float(v)) for v in P[p, s]]) + "\n")


def empirical_semigroup(model, f, x, t, path_count=100_000, seed=0, step=None):
    """Monte Carlo ``H_t f(x) = E f(X_t^x)`` over simulated paths.

    Returns ``(value, standard_error)``.
    """
    if step is None:
        step = t / math.ceil(t) if t > 1 else t
    res = simulate_exact(model, PathSpec(x, t, step, path_count, seed))
    v = f(res.terminal)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))
