"""Tensor quadrature rules for Gaussian expectations and for balls."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import DimensionTooLargeForQuadrature

MAX_TENSOR_DIM = 4
BASE_ORDER = 40
# per-evaluation node budget; keeps one doubling step affordable at n = 4
NODE_BUDGET = 2 ** 22


@lru_cache(maxsize=64)
def _hermite_1d(order):
    z, w = np.polynomial.hermite_e.hermegauss(order)
    return z, w / w.sum()


def _tensor(z, w, n):
    Z = np.stack(np.meshgrid(*([z] * n), indexing="ij"), axis=-1).reshape(-1, n)
    W = np.ones(1)
    for _ in range(n):
        W = np.multiply.outer(W, w).ravel()
    return Z, W


@lru_cache(maxsize=64)
def hermite_rule(n, order):
    """Nodes ``(order**n, n)`` and weights for ``E g(Z)``, ``Z ~ N(0, I_n)``."""
    check_tensor_dim(n)
    Z, W = _tensor(*_hermite_1d(order), n)
    Z.setflags(write=False)
    W.setflags(write=False)
    return Z, W


def check_tensor_dim(n):
    if n > MAX_TENSOR_DIM:
        raise DimensionTooLargeForQuadrature(
            f"tensor quadrature supports n <= {MAX_TENSOR_DIM}, got n={n}")


def order_sequence(n, base=BASE_ORDER, budget=NODE_BUDGET):
    """Orders ``base, 2 base, ...`` that fit the node budget.

    At least two orders are returned so a convergence check is always
    possible; when even ``2 base`` is too large the sequence starts lower.
    """
    check_tensor_dim(n)
    orders = [base]
    while (2 * orders[-1]) ** n <= budget:
        orders.append(2 * orders[-1])
    if len(orders) == 1:
        orders = [base // 2, base]
    return orders


def _gauss_legendre(order, a, b):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


@lru_cache(maxsize=64)
def sphere_rule(n, order):
    """Directions and weights integrating smooth functions over ``S^{n-1}``:
    trapezoid in every periodic angle and Gauss-Legendre in the others."""
    check_tensor_dim(n)
    if n == 1:
        dirs = np.array([[1.0], [-1.0]])
        wd = np.array([1.0, 1.0])
    else:
        m = 2 * order
        phi = 2 * np.pi * np.arange(m) / m
        wphi = np.full(m, 2 * np.pi / m)
        if n == 2:
            dirs = np.stack([np.cos(phi), np.sin(phi)], axis=1)
            wd = wphi
        elif n == 3:
            c, wc = _gauss_legendre(order, -1.0, 1.0)
            s = np.sqrt(1 - c ** 2)
            dirs = np.stack([np.multiply.outer(s, np.cos(phi)).ravel(),
                             np.multiply.outer(s, np.sin(phi)).ravel(),
                             np.repeat(c, m)], axis=1)
            wd = np.multiply.outer(wc, wphi).ravel()
        else:
            # S^3 as (cos e cos a, cos e sin a, sin e cos b, sin e sin b)
            e, we = _gauss_legendre(order, 0.0, np.pi / 2)
            we = we * np.sin(e) * np.cos(e)
            E, A, Bb = (g.ravel() for g in np.meshgrid(e, phi, phi, indexing="ij"))
            dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A),
                             np.sin(E) * np.cos(Bb), np.sin(E) * np.sin(Bb)], axis=1)
            wd = np.einsum("i,j,k->ijk", we, wphi, wphi).ravel()
    dirs.setflags(write=False)
    wd.setflags(write=False)
    return dirs, wd


@lru_cache(maxsize=64)
def ball_rule(n, order):
    """Nodes and weights integrating smooth functions over the unit ball:
    Gauss-Legendre in the radius (with the ``rho^{n-1}`` Jacobian) times
    :func:`sphere_rule`."""
    rho, wr = _gauss_legendre(order, 0.0, 1.0)
    wr = wr * rho ** (n - 1)
    dirs, wd = sphere_rule(n, order)
    nodes = (rho[:, None, None] * dirs[None]).reshape(-1, n)
    weights = np.multiply.outer(wr, wd).ravel()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def ball_order_sequence(n, base=16, budget=NODE_BUDGET):
    orders = [base]

    def size(k):
        return {1: 2 * k, 2: 2 * k ** 2, 3: 2 * k ** 3, 4: 4 * k ** 4}[n]

    while size(2 * orders[-1]) <= budget and len(orders) < 6:
        orders.append(2 * orders[-1])
    return orders

