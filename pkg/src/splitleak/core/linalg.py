"""Explicit Jacobians and small dense symmetric eigensolvers.

Conventions follow the row-vector form used throughout the package: for
``y = f(z)`` with ``z`` flattened to ``n`` entries and ``y`` to ``m``, the
Jacobian ``J`` has shape ``(n, m)`` and ``dy ~= dz @ J``.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import GradTape, Tensor, mul, reshape, sum as tsum

DEFAULT_CAP = 4096
# above this size the cyclic Jacobi sweep is too slow in numpy; LAPACK takes over
JACOBI_MAX_N = 128


class DimensionCapError(ValueError):
    pass


def jacobian(f: Callable[[Tensor], Tensor], z, cap: int = DEFAULT_CAP, chunk: int = 256) -> np.ndarray:
    """Materialize the ``(n, m)`` Jacobian of ``f`` at ``z``.

    ``f`` must accept extra leading batch axes. Each chunk of output
    coordinates is handled by one batched backward pass whose cotangents are
    rows of the identity.
    """
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    n = z.size
    if n > cap:
        raise DimensionCapError(f"input size {n} exceeds Jacobian cap {cap}")
    y0 = f(Tensor(z)).data
    m = y0.size
    if m > cap:
        raise DimensionCapError(f"output size {m} exceeds Jacobian cap {cap}")
    J = np.empty((n, m))
    for start in range(0, m, chunk):
        k = min(chunk, m - start)
        Z = Tensor(np.broadcast_to(z, (k,) + z.shape).copy())
        seed = np.zeros((k, m))
        seed[np.arange(k), start + np.arange(k)] = 1.0
        with GradTape() as tape:
            tape.watch(Z)
            Y = f(Z)
            if Y.shape != (k,) + y0.shape:
                raise ValueError("f is not batch-polymorphic over leading axes")
            loss = tsum(mul(reshape(Y, (k, m)), seed))
        (g,) = tape.gradient(loss, [Z])
        J[:, start:start + k] = g.reshape(k, n).T
    if not np.isfinite(J).all():
        raise FloatingPointError("non-finite Jacobian")
    return J


def row_jacobians(f: Callable[[Tensor], Tensor], rows, cap: int = DEFAULT_CAP) -> np.ndarray:
    """Jacobians of a row-wise map at each row of ``rows`` (shape ``(P, n)``).

    Returns ``(P, n, m)``. ``f`` must act independently on the last axis.
    """
    rows = np.asarray(rows, dtype=np.float64)
    P, n = rows.shape
    m = f(Tensor(rows[:1])).shape[-1]
    if n > cap or m > cap:
        raise DimensionCapError(f"row map {n}->{m} exceeds Jacobian cap {cap}")
    Z = Tensor(np.broadcast_to(rows, (m, P, n)).copy())
    seed = np.zeros((m, P, m))
    seed[np.arange(m), :, np.arange(m)] = 1.0
    with GradTape() as tape:
        tape.watch(Z)
        loss = tsum(mul(f(Z), seed))
    (g,) = tape.gradient(loss, [Z])
    return np.ascontiguousarray(g.transpose(1, 2, 0))


# ------------------------------------------------------------- eigensolvers

def _round_robin(n: int) -> list:
    """Pairings covering every (p, q) once per sweep, n even."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        p = np.array([players[i] for i in range(n // 2)])
        q = np.array([players[n - 1 - i] for i in range(n // 2)])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(S: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60):
    """Cyclic Jacobi on a stack of symmetric matrices ``(..., n, n)``.

    Disjoint rotations of one round-robin round commute, so each round is
    applied as a single vectorized update; the result equals the serial
    cyclic method in round-robin order. Returns unsorted eigenvalues and the
    accumulated rotation matrix (eigenvectors in columns).
    """
    S = np.asarray(S, dtype=np.float64)
    batch = S.shape[:-2]
    n = S.shape[-1]
    A = S.reshape((-1, n, n)).copy()
    odd = n % 2 == 1
    if odd:
        # a decoupled zero row/column keeps the pairing even; it is never rotated
        A = np.pad(A, ((0, 0), (0, 1), (0, 1)))
    N = A.shape[-1]
    V = np.broadcast_to(np.eye(N), A.shape).copy()
    rounds = _round_robin(N) if N > 1 else []
    scale = np.sqrt((A * A).sum(axis=(1, 2)))
    offmask = ~np.eye(N, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt((A[:, offmask] ** 2).sum(axis=1))
        if np.all(off <= tol * np.maximum(scale, np.finfo(float).tiny)):
            break
        for p, q in rounds:
            app = A[:, p, p]
            aqq = A[:, q, q]
            apq = A[:, p, q]
            nz = apq != 0.0
            theta = np.divide(aqq - app, 2.0 * apq, out=np.zeros_like(apq), where=nz)
            sgn = np.where(theta >= 0.0, 1.0, -1.0)
            t = np.where(nz, sgn / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            cc = c[:, None, :]
            ss = s[:, None, :]
            Ap, Aq = A[:, :, p], A[:, :, q]
            A[:, :, p] = cc * Ap - ss * Aq
            A[:, :, q] = ss * Ap + cc * Aq
            Ap, Aq = A[:, p, :], A[:, q, :]
            A[:, p, :] = c[:, :, None] * Ap - s[:, :, None] * Aq
            A[:, q, :] = s[:, :, None] * Ap + c[:, :, None] * Aq
            A[:, p, q] = 0.0
            A[:, q, p] = 0.0
            Vp, Vq = V[:, :, p], V[:, :, q]
            V[:, :, p] = cc * Vp - ss * Vq
            V[:, :, q] = ss * Vp + cc * Vq
    vals = np.diagonal(A, axis1=1, axis2=2).copy()
    if odd:
        vals, V = vals[:, :n], V[:, :n, :n]
    return vals.reshape(batch + (n,)), V.reshape(batch + (n, n))


def sym_eig(S, method: str = "auto", cap: int = DEFAULT_CAP, sym_tol: float = 1e-10):
    """Eigen-decomposition of a symmetric matrix (or stack of them).

    Returns ``(values, vectors)`` with values sorted descending and
    ``vectors[..., :, i]`` the unit eigenvector for ``values[..., i]``.
    ``method`` is ``"jacobi"``, ``"lapack"`` or ``"auto"`` (Jacobi up to
    ``JACOBI_MAX_N``).
    """
    S = np.asarray(S.data if isinstance(S, Tensor) else S, dtype=np.float64)
    if S.ndim < 2 or S.shape[-1] != S.shape[-2]:
        raise ValueError(f"sym_eig needs square matrices, got {S.shape}")
    n = S.shape[-1]
    if n > cap:
        raise DimensionCapError(f"matrix size {n} exceeds cap {cap}")
    if not np.isfinite(S).all():
        raise FloatingPointError("non-finite matrix")
    asym = np.abs(S - np.swapaxes(S, -1, -2)).max(initial=0.0)
    if asym > sym_tol * max(1.0, np.abs(S).max(initial=0.0)):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    if method == "auto":
        method = "jacobi" if n <= JACOBI_MAX_N else "lapack"
    if method == "jacobi":
        vals, vecs = jacobi_eigh(S)
    elif method == "lapack":
        vals, vecs = np.linalg.eigh(S)
    else:
        raise ValueError(f"unknown method {method!r}")
    order = np.argsort(-vals, axis=-1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=-1)
    vecs = np.take_along_axis(vecs, order[..., None, :], axis=-1)
    return vals, vecs


def _fix_sign(v: np.ndarray) -> float:
    nz = np.flatnonzero(np.abs(v) > 1e-14 * max(np.abs(v).max(), 1e-300))
    return -1.0 if nz.size and v[nz[0]] < 0 else 1.0


def top_singular(M, method: str = "auto"):
    """Largest singular value with unit left/right vectors ``(sigma, u, v)``.

    ``M @ v = sigma * u``. Signs are fixed so the first non-negligible
    component of ``v`` is positive.
    """
    M = np.asarray(M.data if isinstance(M, Tensor) else M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("top_singular expects a matrix")
    if not np.isfinite(M).all():
        raise FloatingPointError("non-finite matrix")
    r, c = M.shape
    if not np.any(M):
        u, v = np.zeros(r), np.zeros(c)
        u[0] = v[0] = 1.0
        return 0.0, u, v
    if c <= r:
        _, vecs = sym_eig(M.T @ M, method=method)
        v = vecs[:, 0]
        Mv = M @ v
        sigma = float(np.linalg.norm(Mv))
        u = Mv / sigma
    else:
        _, vecs = sym_eig(M @ M.T, method=method)
        u = vecs[:, 0]
        Mtu = M.T @ u
        sigma = float(np.linalg.norm(Mtu))
        v = Mtu / sigma
    sgn = _fix_sign(v)
    return sigma, sgn * u, sgn * v


def spectral_norm(M) -> float:
    return top_singular(M)[0]
