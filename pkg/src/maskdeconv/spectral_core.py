"""Transform and dense linear-algebra kernels.

All transforms use the unitary DFT convention: row ``l`` of the partial DFT
on support ``rows`` is ``exp(-2j*pi*rows[l]*j/L) / sqrt(L)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Below this length circular convolution is summed directly.
_DIRECT_CONV_MAX = 32


@dataclass(frozen=True)
class PartialDFT:
    """Rows ``rows`` of the unitary ``L``-point DFT matrix."""

    L: int
    rows: tuple

    def __post_init__(self):
        rows = tuple(int(r) for r in np.atleast_1d(self.rows))
        object.__setattr__(self, "rows", rows)
        if self.L < 1:
            raise ValueError(f"L must be positive, got {self.L}")
        if not rows:
            raise ValueError("a partial DFT needs at least one row")
        if len(set(rows)) != len(rows):
            raise ValueError("partial DFT rows must be distinct")
        if min(rows) < 0 or max(rows) >= self.L:
            raise ValueError(f"rows must lie in 0..{self.L - 1}")

    @classmethod
    def contiguous(cls, L, N, start=0):
        """``N`` circularly consecutive frequencies starting at ``start``."""
        if not 1 <= N <= L:
            raise ValueError(f"need 1 <= N <= L, got N={N}, L={L}")
        return cls(L, tuple((start + np.arange(N)) % L))

    @property
    def N(self):
        return len(self.rows)

    @property
    def grid(self):
        return (self.L,)

    @property
    def index(self):
        return np.asarray(self.rows, dtype=np.intp)

    def apply(self, x):
        """Apply along the last axis: ``(..., L) -> (..., N)``."""
        x = np.asarray(x)
        if x.shape[-1] != self.L:
            raise ValueError(f"expected trailing length {self.L}, got {x.shape[-1]}")
        return np.fft.fft(x, axis=-1, norm="ortho")[..., self.index]

    def adjoint(self, y):
        """Apply the conjugate transpose along the last axis: ``(..., N) -> (..., L)``."""
        y = np.asarray(y)
        if y.shape[-1] != self.N:
            raise ValueError(f"expected trailing length {self.N}, got {y.shape[-1]}")
        full = np.zeros(y.shape[:-1] + (self.L,), dtype=complex)
        full[..., self.index] = y
        return np.fft.ifft(full, axis=-1, norm="ortho")

    def matrix(self):
        j = np.arange(self.L)
        return np.exp(-2j * np.pi * np.outer(self.index, j) / self.L) / np.sqrt(self.L)

    def negation_map(self):
        """Permutation ``p`` with ``rows[p[l]] == -rows[l] (mod L)``, or None."""
        pos = {r: i for i, r in enumerate(self.rows)}
        try:
            return np.array([pos[(-r) % self.L] for r in self.rows], dtype=np.intp)
        except KeyError:
            return None


@dataclass(frozen=True)
class SeparablePartialDFT:
    """Kronecker product of 1D partial DFTs acting on row-major flattened grids.

    Output entry ``l1 * N2 + l2`` pairs row ``l1`` of the first factor with row
    ``l2`` of the second, matching ``np.kron``.
    """

    factors: tuple

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if len(self.factors) != 2:
            raise ValueError("only 2D separable transforms are supported")

    @property
    def L(self):
        return self.factors[0].L * self.factors[1].L

    @property
    def N(self):
        return self.factors[0].N * self.factors[1].N

    @property
    def grid(self):
        return (self.factors[0].L, self.factors[1].L)

    @property
    def rows(self):
        r1, r2 = self.factors[0].index, self.factors[1].index
        L2 = self.factors[1].L
        return tuple((r1[:, None] * L2 + r2[None, :]).ravel())

    def apply(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.L:
            raise ValueError(f"expected trailing length {self.L}, got {x.shape[-1]}")
        f1, f2 = self.factors
        lead = x.shape[:-1]
        y = np.fft.fft2(x.reshape(lead + self.grid), norm="ortho")
        y = y[..., f1.index, :][..., f2.index]
        return y.reshape(lead + (self.N,))

    def adjoint(self, y):
        y = np.asarray(y)
        if y.shape[-1] != self.N:
            raise ValueError(f"expected trailing length {self.N}, got {y.shape[-1]}")
        f1, f2 = self.factors
        lead = y.shape[:-1]
        full = np.zeros(lead + self.grid, dtype=complex)
        full[..., f1.index[:, None], f2.index[None, :]] = y.reshape(lead + (f1.N, f2.N))
        return np.fft.ifft2(full, norm="ortho").reshape(lead + (self.L,))

    def matrix(self):
        return np.kron(self.factors[0].matrix(), self.factors[1].matrix())

    def negation_map(self):
        p1, p2 = (f.negation_map() for f in self.factors)
        if p1 is None or p2 is None:
            return None
        N2 = self.factors[1].N
        return (p1[:, None] * N2 + p2[None, :]).ravel()


def partial_dft(x, P):
    """Return ``F_rows @ x`` for a :class:`PartialDFT` (or separable) ``P``."""
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != P.L:
        raise ValueError(f"x must be a vector of length {P.L}, got shape {x.shape}")
    return P.apply(x)


def circular_convolve(h, x, shape=None):
    """Circular convolution ``H @ x`` with ``H`` circulant with first column ``h``.

    ``x`` may carry leading batch axes. With ``shape=(L1, L2)`` both inputs are
    row-major flattened 2D arrays and the convolution is two-dimensional.
    """
    h = np.asarray(h)
    x = np.asarray(x)
    if h.ndim != 1 or h.shape[0] != x.shape[-1]:
        raise ValueError(f"length mismatch: h has shape {h.shape}, x has {x.shape}")
    L = h.shape[0]
    real = np.isrealobj(h) and np.isrealobj(x)

    if shape is not None:
        shape = tuple(shape)
        if int(np.prod(shape)) != L:
            raise ValueError(f"shape {shape} does not match length {L}")
        lead = x.shape[:-1]
        hf = np.fft.fft2(h.reshape(shape))
        y = np.fft.ifft2(hf * np.fft.fft2(x.reshape(lead + shape))).reshape(lead + (L,))
    elif L < _DIRECT_CONV_MAX:
        n = np.arange(L)
        circ = h[(n[:, None] - n[None, :]) % L]
        y = x @ circ.T
    else:
        y = np.fft.ifft(np.fft.fft(h) * np.fft.fft(x, axis=-1), axis=-1)
    return y.real if real else y


class RankOne(NamedTuple):
    """Top singular triple ``sigma * u v^*``."""

    u: np.ndarray
    v: np.ndarray
    sigma: float

    @property
    def degenerate(self):
        return self.sigma == 0.0

    def matrix(self):
        return self.sigma * np.outer(self.u, self.v.conj())


def best_rank_one(Z, tol=1e-12, max_iter=20000):
    """Best rank-one approximation of ``Z`` by power iteration on ``Z^* Z``.

    Iteration stops once the relative change of the singular value estimate and
    the relative eigen-residual ``||Z^*Z v - s^2 v|| / s^2`` both drop below
    ``tol``. The start vector is drawn from a fixed seed so results are
    reproducible. A zero matrix returns ``sigma = 0`` with unit basis vectors.
    """
    Z = np.asarray(Z)
    if Z.ndim != 2:
        raise ValueError(f"Z must be a matrix, got shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("Z contains non-finite values")
    n_rows, n_cols = Z.shape
    dtype = np.result_type(Z.dtype, np.float64)
    fro = np.linalg.norm(Z)
    if fro == 0.0:
        u = np.zeros(n_rows, dtype=dtype)
        v = np.zeros(n_cols, dtype=dtype)
        u[0] = v[0] = 1.0
        return RankOne(u, v, 0.0)

    rng = np.random.default_rng(0)
    v = rng.standard_normal(n_cols)
    if np.iscomplexobj(Z):
        v = v + 1j * rng.standard_normal(n_cols)
    v = v / np.linalg.norm(v)

    Zh = Z.conj().T
    sigma = 0.0
    converged = False
    for _ in range(max_iter):
        w = Z @ v
        g = Zh @ w
        lam = np.vdot(v, g).real
        resid = np.linalg.norm(g - lam * v) / lam if lam > 0 else np.inf
        sigma_new = np.sqrt(max(lam, 0.0))
        gnorm = np.linalg.norm(g)
        if gnorm == 0.0:
            break
        v = g / gnorm
        if abs(sigma_new - sigma) <= tol * sigma_new and resid <= tol:
            sigma = sigma_new
            converged = True
            break
        sigma = sigma_new
    if not converged:
        warnings.warn(
            f"power iteration stopped after {max_iter} iterations without reaching tol={tol}",
            RuntimeWarning,
            stacklevel=2,
        )
    w = Z @ v
    sigma = float(np.linalg.norm(w))
    u = w / sigma
    return RankOne(u, v, sigma)


def rank_of_submatrix(V, rows, tol=1e-10):
    """Numerical rank of the square restriction ``V[rows, :]``.

    Counts singular values above ``tol`` times the largest one.
    """
    V = np.asarray(V)
    rows = np.asarray(rows, dtype=np.intp)
    if V.ndim != 2:
        raise ValueError(f"V must be a matrix, got shape {V.shape}")
    if rows.shape != (V.shape[1],):
        raise ValueError(f"need exactly N={V.shape[1]} rows, got {rows.size}")
    if rows.min() < 0 or rows.max() >= V.shape[0]:
        raise ValueError("row index out of range")
    return int(_square_ranks(V[rows][None], tol)[0])


def _square_ranks(blocks, tol):
    """Numerical ranks of a stack of square matrices with shape (B, N, N)."""
    blocks = np.asarray(blocks)
    N = blocks.shape[-1]
    ranks = np.zeros(blocks.shape[0], dtype=np.intp)
    todo = np.ones(blocks.shape[0], dtype=bool)
    # sigma_max / sigma_min <= ||B||_F ||B^-1||_F, so a small product certifies full rank
    try:
        with np.errstate(all="ignore"):
            inv = np.linalg.inv(blocks)
            bound = np.linalg.norm(blocks, axis=(1, 2)) * np.linalg.norm(inv, axis=(1, 2))
        ok = np.isfinite(bound) & (bound * tol < 0.5)
        ranks[ok] = N
        todo = ~ok
    except np.linalg.LinAlgError:
        pass
    if todo.any():
        s = np.linalg.svd(blocks[todo], compute_uv=False)
        top = s[:, :1]
        ranks[todo] = np.sum(s > tol * np.where(top > 0, top, np.inf), axis=1)
    return ranks
