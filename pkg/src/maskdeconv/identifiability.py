"""Uniqueness of the rank-one matrix ``h x^T`` under uniform subsampling.

With ``Phi = I`` each sensor reading is a single product ``x_i h_j``; the
readings of column ``i`` sit at rows ``J_i = {(kT - i) mod L : 0 <= k < N}``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .spectral_core import _square_ranks, best_rank_one

ZERO_REL_TOL = 1e-12


class InconsistentDataError(ValueError):
    pass


class NonDegeneracyWarning(UserWarning):
    """Some pixel or kernel tap never appears in a nonzero observed product."""


@dataclass(frozen=True, eq=False)
class ObservationPattern:
    L: int
    T: int
    N: int
    columns: np.ndarray  # (L, N); row i lists J_i in sensor order

    def observed(self):
        """Set of observed ``(j, i)`` positions of ``h x^T``."""
        return {(int(j), i) for i in range(self.L) for j in self.columns[i]}


def observation_pattern(scheme):
    L, T, N = scheme.L, scheme.T, scheme.N
    k = np.arange(N)
    cols = (k[None, :] * T - np.arange(L)[:, None]) % L
    return ObservationPattern(L, T, N, cols)


@dataclass(frozen=True, eq=False)
class ObservationGraph:
    """Bipartite graph; vertices ``0..L-1`` are ``x`` entries, ``L..2L-1`` are ``h`` entries."""

    L: int
    edges: np.ndarray  # (E, 2) pairs (i, j)
    labels: np.ndarray  # (2L,) component id per vertex
    sizes: np.ndarray  # vertex count per component id

    @property
    def n_components(self):
        return self.sizes.size

    def big_components(self):
        return np.flatnonzero(self.sizes > 1)

    def isolated(self):
        iso = self.sizes[self.labels] == 1
        return np.flatnonzero(iso[: self.L]), np.flatnonzero(iso[self.L:])


def _graph_from_edges(L, edges):
    edges = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
    adj = coo_matrix(
        (np.ones(len(edges)), (edges[:, 0], L + edges[:, 1])), shape=(2 * L, 2 * L)
    )
    n, labels = connected_components(adj, directed=False)
    sizes = np.bincount(labels, minlength=n)
    return ObservationGraph(L, edges, labels, sizes)


def _support(mask, L, name):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (L,):
        raise ValueError(f"{name} must be a length-{L} boolean vector, got shape {mask.shape}")
    return mask


def nondegeneracy_violations(pattern, x_support, h_support):
    """Indices violating the assumption that every nonzero entry meets a nonzero product.

    Returns ``(bad_x, bad_h)``: nonzero ``x_i`` whose observed kernel taps are
    all zero, and nonzero ``h_j`` whose observed partners in ``x`` are all zero.
    """
    L = pattern.L
    x_support = _support(x_support, L, "x_support")
    h_support = _support(h_support, L, "h_support")
    hit_h = h_support[pattern.columns].any(axis=1)
    bad_x = np.flatnonzero(x_support & ~hit_h)
    partner = np.zeros(L, dtype=bool)
    for i in np.flatnonzero(x_support):
        partner[pattern.columns[i]] = True
    bad_h = np.flatnonzero(h_support & ~partner)
    return bad_x, bad_h


def build_graph(pattern, x_support, h_support):
    """Edge ``(i, j)`` iff ``j`` is in ``J_i`` and both ``x_i`` and ``h_j`` are nonzero."""
    L = pattern.L
    x_support = _support(x_support, L, "x_support")
    h_support = _support(h_support, L, "h_support")
    if not x_support.any():
        raise ValueError("x_support is empty; the image must be nonzero")
    bad_x, bad_h = nondegeneracy_violations(pattern, x_support, h_support)
    if bad_x.size or bad_h.size:
        warnings.warn(
            f"non-degeneracy violated: x entries {bad_x.tolist()} and h entries "
            f"{bad_h.tolist()} meet no nonzero observed product",
            NonDegeneracyWarning,
            stacklevel=2,
        )
    i_idx = np.repeat(np.arange(L), pattern.N)
    j_idx = pattern.columns.ravel()
    keep = x_support[i_idx] & h_support[j_idx]
    return _graph_from_edges(L, np.column_stack([i_idx[keep], j_idx[keep]]))


def build_graph_from_measurements(M, pattern, rel_tol=ZERO_REL_TOL):
    """Graph from numeric ``Phi = I`` data; tiny readings count as zeros."""
    M = np.asarray(M)
    if M.shape != (pattern.N, pattern.L):
        raise ValueError(f"M must be {pattern.N} x {pattern.L}, got {M.shape}")
    mag = np.abs(M)
    top = mag.max()
    nonzero = mag > rel_tol * top if top > 0 else np.zeros_like(mag, dtype=bool)
    k_idx, i_idx = np.nonzero(nonzero)
    j_idx = pattern.columns[i_idx, k_idx]
    return _graph_from_edges(pattern.L, np.column_stack([i_idx, j_idx]))


@dataclass(frozen=True)
class IdentifiabilityResult:
    identifiable: bool
    reason: str
    component_orders: tuple  # orders of components with more than one vertex
    forced_zero_x: tuple = field(default=())
    forced_zero_h: tuple = field(default=())

    def __bool__(self):
        return self.identifiable

    def summary(self):
        n = len(self.component_orders)
        if self.identifiable:
            return f"identifiable: 1 component of order {self.component_orders[0]}"
        if n == 0:
            return f"not identifiable: {self.reason}"
        return f"not identifiable: {n} components of order > 1"

    def to_dict(self):
        return {
            "identifiable": self.identifiable,
            "reason": self.reason,
            "component_orders": list(self.component_orders),
            "forced_zero_x": list(self.forced_zero_x),
            "forced_zero_h": list(self.forced_zero_h),
        }


def check_identifiable(g):
    """Unique recovery holds iff exactly one component has two or more vertices.

    Isolated vertices are entries forced to zero.
    """
    big = g.big_components()
    orders = tuple(int(s) for s in sorted(g.sizes[big], reverse=True))
    zx, zh = g.isolated()
    zx, zh = tuple(int(i) for i in zx), tuple(int(j) for j in zh)
    if len(big) == 1:
        return IdentifiabilityResult(True, "connected", orders, zx, zh)
    if len(big) == 0:
        return IdentifiabilityResult(False, "all observed products zero", orders, zx, zh)
    reason = f"{len(big)} components of order > 1 scale independently"
    return IdentifiabilityResult(False, reason, orders, zx, zh)


@dataclass(frozen=True)
class SubspaceCheck:
    passed: bool
    column: int = None  # first i whose restriction is rank deficient
    rank: int = None

    def __bool__(self):
        return self.passed

    def summary(self):
        if self.passed:
            return "subspace condition: PASS"
        return f"subspace condition: FAIL at column {self.column} (rank {self.rank})"

    def to_dict(self):
        return {"passed": self.passed, "column": self.column, "rank": self.rank}


def check_subspace_condition(V, scheme, tol=1e-10):
    """Pass iff ``V[J_i, :]`` is full rank for every column ``i``."""
    V = np.asarray(V)
    N = scheme.N
    if V.ndim != 2 or V.shape != (scheme.L, N):
        raise ValueError(f"V must be {scheme.L} x {N}, got shape {V.shape}")
    pattern = observation_pattern(scheme)
    # rank ignores row order, so columns observing the same row set share one test
    rowsets, inverse = np.unique(np.sort(pattern.columns, axis=1), axis=0, return_inverse=True)
    ranks = _square_ranks(V[rowsets], tol)[inverse.ravel()]
    bad = np.flatnonzero(ranks < N)
    if bad.size:
        i = int(bad[0])
        return SubspaceCheck(False, i, int(ranks[i]))
    return SubspaceCheck(True)


def reconstruct_from_full_observation(M, V, scheme, tol=1e-10, zero_tol=ZERO_REL_TOL):
    """Recover ``(h, x)`` from ``Phi = I`` data when ``h`` lies in ``range(V)``.

    Each nonzero observed column ``i`` gives ``x_i a`` (with ``h = V a``) by a
    square solve on ``V[J_i]``. The stacked estimates form ``a x^T``, whose best
    rank-one factorization yields both signals. The scale is fixed by
    ``||h|| = 1`` and a real-positive first nonzero entry of ``x``.
    """
    M = np.asarray(M)
    V = np.asarray(V)
    L, N = scheme.L, scheme.N
    if M.shape != (N, L):
        raise ValueError(f"M must be {N} x {L}, got shape {M.shape}")
    check = check_subspace_condition(V, scheme, tol)
    if not check:
        raise ValueError(f"basis fails the subspace condition at column {check.column}")
    col_norm = np.linalg.norm(M, axis=0)
    if col_norm.max() == 0:
        raise InconsistentDataError("all observed columns are zero; kernel or image is zero")
    live = col_norm > zero_tol * col_norm.max()
    pattern = observation_pattern(scheme)
    B = np.zeros((N, L), dtype=complex)
    for i in np.flatnonzero(live):
        B[:, i] = np.linalg.solve(V[pattern.columns[i]], M[:, i])
    u, v, sigma = best_rank_one(B)
    a = u / np.linalg.norm(V @ u)
    x = sigma * np.linalg.norm(V @ u) * v.conj()
    x[~live] = 0
    pivot = np.flatnonzero(np.abs(x) > zero_tol * np.abs(x).max())[0]
    phase = x[pivot] / abs(x[pivot])
    h = (V @ a) * phase
    x = x / phase
    if np.isrealobj(M) and np.isrealobj(V):
        h, x = h.real, x.real
    return h, x
