"""Dense linear-algebra and finite-difference helpers.

Every function accepts either a single point (shape ``(n,)``) or a batch
(shape ``(B, n)``); callables passed to the differentiation helpers must be
vectorised over the leading axis in the same way.
"""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

RANK_TOL = 1e-10


class NullSpaceError(ValueError):
    """Raised when B^T has a trivial null space (fully actuated system)."""


class NonFiniteError(FloatingPointError):
    pass


def make_rng(seed: int, label: str | None = None) -> np.random.Generator:
    """Generator for ``seed``, optionally split into an independent stream by ``label``."""
    if label is None:
        return np.random.default_rng(np.random.SeedSequence(int(seed)))
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))


def sym(a: np.ndarray) -> np.ndarray:
    """Symmetric part ``(A + A^T) / 2`` over the last two axes."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def null_space(b: np.ndarray, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis of the null space of ``b.T``.

    The basis is the block of left-singular vectors of ``b`` beyond its
    numerical rank, where singular values below ``tol * sigma_max`` count as
    zero. A batch ``(B, n, m)`` is accepted when every member has the same rank.
    """
    b = np.asarray(b, dtype=float)
    if b.ndim < 2 or b.shape[-2] < 1 or b.shape[-1] < 1:
        raise ValueError(f"expected an n x m matrix, got shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise NonFiniteError("actuation matrix has non-finite entries")
    n = b.shape[-2]
    u, s, _ = np.linalg.svd(b, full_matrices=True)
    smax = s[..., :1]
    rank = np.sum(s > tol * np.maximum(smax, np.finfo(float).tiny), axis=-1)
    ranks = np.unique(rank)
    if ranks.size != 1:
        raise ValueError(f"batch has mixed numerical ranks {ranks.tolist()}")
    r = int(ranks[0])
    if r >= n:
        raise NullSpaceError(f"B has full row rank {r}; null space of B^T is empty")
    return u[..., :, r:]


def min_eig_sym(a: np.ndarray) -> np.ndarray | float:
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("matrix has non-finite entries")
    lo = np.linalg.eigvalsh(sym(a))[..., 0]
    return float(lo) if lo.ndim == 0 else lo


def default_step(x: np.ndarray) -> np.ndarray:
    return 1e-4 * np.maximum(1.0, np.abs(x))


def fd_jacobian(
    g: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    h: float | np.ndarray | None = None,
) -> np.ndarray:
    """Central-difference Jacobian of ``g`` at ``x``; result shape ``(..., out, n)``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    steps = default_step(x) if h is None else np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    cols = []
    for i in range(n):
        hi = steps[..., i : i + 1]
        e = np.zeros(n)
        e[i] = 1.0
        hi_col = np.asarray(hi)
        fp = np.asarray(g(x + hi_col * e), dtype=float)
        fm = np.asarray(g(x - hi_col * e), dtype=float)
        col = (fp - fm) / (2.0 * hi_col)
        if not np.all(np.isfinite(col)):
            raise NonFiniteError(f"non-finite function value when perturbing coordinate {i}")
        cols.append(col)
    return np.stack(cols, axis=-1)


def lie_derivative_matrix(
    wfun: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    v: np.ndarray,
    h: float | np.ndarray | None = None,
) -> np.ndarray:
    """Directional derivative of a matrix field: ``sum_i v_i dW/dx_i`` by central differences."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    n = x.shape[-1]
    steps = default_step(x) if h is None else np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    out = None
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        hi = steps[..., i : i + 1]
        dw = (np.asarray(wfun(x + hi * e)) - np.asarray(wfun(x - hi * e))) / (2.0 * hi[..., None])
        term = v[..., i, None, None] * dw
        out = term if out is None else out + term
    return out
