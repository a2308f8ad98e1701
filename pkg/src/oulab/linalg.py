"""Dense linear algebra kernels: matrix exponential and Lyapunov solve."""

from __future__ import annotations

import numpy as np

from .errors import LyapunovSingular, MatrixExpOverflow, NotPositiveDefinite

# Pade coefficients and 1-norm thresholds (Higham 2005, Table 2.3).
_PADE = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0, 960960.0,
         16380.0, 182.0, 1.0),
}
_THETA = {3: 1.495585217958292e-2, 5: 2.539398330063230e-1,
          7: 9.504178996162932e-1, 9: 2.097847961257068e0,
          13: 5.371920351148152e0}

MAX_EXPONENT_NORM = 1e4


def _pade_uv(A, m):
    b = _PADE[m]
    n = A.shape[-1]
    ident = np.broadcast_to(np.eye(n), A.shape)
    A2 = A @ A
    if m == 13:
        A4 = A2 @ A2
        A6 = A4 @ A2
        U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
                 + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
        V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
             + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident)
        return U, V
    powers = [ident, A2]
    while len(powers) < (m + 1) // 2:
        powers.append(powers[-1] @ A2)
    U = sum(b[2 * k + 1] * powers[k] for k in range(len(powers)))
    V = sum(b[2 * k] * powers[k] for k in range(len(powers)))
    return A @ U, V


def matrix_exp(A, t=1.0):
    """Return ``exp(t * A)`` by scaling and squaring with Pade approximants.

    ``A`` may be a single ``(n, n)`` matrix or a stack ``(..., n, n)``; ``t``
    is a scalar or an array broadcastable against the stack dimensions.
    Degree 3..13 approximants are picked per matrix from its 1-norm, so no
    eigendecomposition is involved and defective matrices are handled like
    any other.
    """
    A = np.asarray(A, dtype=float)
    t = np.asarray(t, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError("matrix_exp needs square matrices")
    X = t[..., None, None] * A
    if not np.all(np.isfinite(X)):
        raise ValueError("matrix_exp needs finite entries")
    shape = X.shape
    X = X.reshape((-1,) + shape[-2:])
    n = X.shape[-1]
    norms = np.abs(X).sum(axis=-2).max(axis=-1)
    if np.any(norms > MAX_EXPONENT_NORM):
        raise ValueError(f"|t|*||A|| exceeds {MAX_EXPONENT_NORM:g}")

    out = np.empty_like(X)
    zero = norms == 0.0
    out[zero] = np.eye(n)
    todo = ~zero
    for m in (3, 5, 7, 9):
        sel = todo & (norms <= _THETA[m])
        if np.any(sel):
            U, V = _pade_uv(X[sel], m)
            out[sel] = np.linalg.solve(V - U, V + U)
            todo &= ~sel
    if np.any(todo):
        Xs = X[todo]
        squarings = np.maximum(0, np.ceil(np.log2(norms[todo] / _THETA[13]))).astype(int)
        Xs = Xs / (2.0 ** squarings)[:, None, None]
        U, V = _pade_uv(Xs, 13)
        R = np.linalg.solve(V - U, V + U)
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(int(squarings.max())):
                act = squarings > k
                R[act] = R[act] @ R[act]
        out[todo] = R
    if not np.all(np.isfinite(out)):
        raise MatrixExpOverflow("matrix exponential overflowed")
    return out.reshape(shape)


def matrix_expm1(A, t=1.0):
    """Return ``exp(t * A) - I`` without cancellation for small ``t * A``.

    It is the upper right block of ``exp([[tA, tA], [0, 0]])``; same
    broadcasting rules as :func:`matrix_exp`.
    """
    A = np.asarray(A, dtype=float)
    t = np.asarray(t, dtype=float)
    X = t[..., None, None] * A
    n = X.shape[-1]
    aug = np.zeros(X.shape[:-2] + (2 * n, 2 * n))
    aug[..., :n, :n] = X
    aug[..., :n, n:] = X
    return matrix_exp(aug)[..., :n, n:]


def symmetrize(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def spd_cholesky(M, what="matrix"):
    """Cholesky factor of the symmetrized ``M``; raises if not definite."""
    try:
        return np.linalg.cholesky(symmetrize(M))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"{what} is not positive definite") from exc


def solve_lyapunov(B, Q, rtol=1e-10):
    """Solve ``B X + X B^T + Q = 0`` through the Kronecker-vectorized system.

    The ``n^2 x n^2`` dense system is fine for the small dimensions this
    package targets.
    """
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = B.shape[0]
    eye = np.eye(n)
    # column-major vec: vec(BX) = (I kron B) vec X, vec(XB^T) = (B kron I) vec X
    K = np.kron(eye, B) + np.kron(B, eye)
    try:
        x = np.linalg.solve(K, -Q.reshape(-1, order="F"))
    except np.linalg.LinAlgError as exc:
        raise LyapunovSingular("Lyapunov system is singular") from exc
    X = symmetrize(x.reshape(n, n, order="F"))
    resid = lyapunov_residual(B, Q, X)
    if not np.isfinite(resid) or resid > rtol:
        raise LyapunovSingular(f"Lyapunov residual {resid:.3e} exceeds {rtol:g}")
    return X


def lyapunov_residual(B, Q, X):
    """Relative residual ``||B X + X B^T + Q|| / ||Q||`` in Frobenius norm."""
    return float(np.linalg.norm(B @ X + X @ B.T + Q) / np.linalg.norm(Q))
