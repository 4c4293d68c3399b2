"""Domain types and generators: images, bandpass kernels, masks and subsampling."""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import binfmt
from .spectral_core import PartialDFT, SeparablePartialDFT

NORM_TOL = 1e-10
COND_LIMIT = 1e12


class SingularWhiteningError(ValueError):
    """The whitening matrix is numerically singular."""

    def __init__(self, cond):
        super().__init__(f"whitening matrix is numerically singular (condition number {cond:.3e})")
        self.cond = cond


def _as_pair(value, name):
    if np.ndim(value) == 0:
        return None
    value = tuple(int(v) for v in value)
    if len(value) != 2:
        raise ValueError(f"{name} must be a scalar or a pair, got {value}")
    return value


def make_transform(L, N, omega_start=0):
    """Partial DFT on a contiguous support; pairs of arguments give a 2D grid."""
    Ls = _as_pair(L, "L")
    if Ls is None:
        return PartialDFT.contiguous(int(L), int(N), int(omega_start))
    Ns = _as_pair(N, "N")
    if Ns is None:
        raise ValueError("2D grids need N given per axis")
    starts = _as_pair(omega_start, "omega_start") or (int(omega_start),) * 2
    return SeparablePartialDFT(
        tuple(PartialDFT.contiguous(l, n, s) for l, n, s in zip(Ls, Ns, starts))
    )


# --------------------------------------------------------------------------- images


@dataclass(frozen=True)
class Image:
    """A scene ``x`` stored flat (row-major for 2D data).

    ``raw_scale`` is the factor that maps ``values`` back to raw pixel units
    when the image was loaded from a file; ``maxval`` is the file's maxval.
    """

    values: np.ndarray
    shape: tuple = None
    raw_scale: float = None
    maxval: int = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 1 or values.size < 1:
            raise ValueError("image values must be a non-empty vector")
        shape = tuple(self.shape) if self.shape is not None else (values.size,)
        if int(np.prod(shape)) != values.size:
            raise ValueError(f"shape {shape} does not match {values.size} values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shape", shape)

    @property
    def L(self):
        return self.values.size

    @property
    def norm(self):
        return float(np.linalg.norm(self.values))

    def normalized(self):
        n = self.norm
        if n == 0:
            raise ValueError("cannot normalize a zero image")
        scale = None if self.raw_scale is None else self.raw_scale * n
        return Image(self.values / n, self.shape, scale, self.maxval)

    @classmethod
    def from_array(cls, a, normalize=True):
        a = np.asarray(a)
        img = cls(a.ravel(), a.shape)
        return img.normalized() if normalize else img


def gen_image(L, seed=None, kind="gaussian"):
    """Random unit-norm real image of length ``L`` (or grid ``L=(L1, L2)``)."""
    shape = _as_pair(L, "L") or (int(L),)
    n = int(np.prod(shape))
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        values = rng.standard_normal(n)
    elif kind == "uniform":
        values = rng.uniform(0.0, 1.0, n)
    elif kind == "complex":
        values = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    else:
        raise ValueError(f"unknown image kind {kind!r}")
    return Image(values / np.linalg.norm(values), shape)


# --------------------------------------------------------------------------- kernels


@dataclass(frozen=True, eq=False)
class BlurKernel:
    """Bandpass blur with unit-norm spectrum ``freq`` on the transform's support."""

    freq: np.ndarray
    transform: PartialDFT | SeparablePartialDFT

    def __post_init__(self):
        freq = np.asarray(self.freq, dtype=complex)
        if freq.shape != (self.transform.N,):
            raise ValueError(f"freq must have length {self.transform.N}, got shape {freq.shape}")
        norm = np.linalg.norm(freq)
        if abs(norm - 1.0) > NORM_TOL:
            raise ValueError(f"kernel spectrum must have unit l2-norm, got {norm:.12g}")
        object.__setattr__(self, "freq", freq)

    @classmethod
    def from_freq(cls, freq, L, omega_start=0):
        freq = np.asarray(freq)
        if np.ndim(L) != 0:
            raise ValueError("use BlurKernel(freq, transform) for 2D kernels")
        return cls(freq, make_transform(L, len(freq), omega_start))

    @property
    def L(self):
        return self.transform.L

    @property
    def N(self):
        return self.transform.N

    @property
    def grid(self):
        return self.transform.grid

    @property
    def omega(self):
        return self.transform.rows

    @property
    def omega_start(self):
        t = self.transform
        if isinstance(t, SeparablePartialDFT):
            return tuple(f.rows[0] for f in t.factors)
        return t.rows[0]

    @functools.cached_property
    def h(self):
        """Time-domain kernel ``F_omega^* freq``; real when the spectrum is Hermitian."""
        h = self.transform.adjoint(self.freq)
        if self.transform.negation_map() is not None:
            p = self.transform.negation_map()
            if np.allclose(self.freq[p], self.freq.conj(), atol=1e-14, rtol=0):
                return h.real.copy()
        return h

    @property
    def coherence(self):
        return coherence(self)


def _centred_start(L, N):
    if N == L:
        return 0
    if N % 2 == 0:
        raise ValueError(f"a support of even size {N} < L cannot be centred at frequency 0")
    return (-(N - 1) // 2) % L


def _resolve_support(L, N, omega_start, conj_symmetric):
    Ls = _as_pair(L, "L")
    if omega_start is None:
        if not conj_symmetric:
            omega_start = 0 if Ls is None else (0, 0)
        elif Ls is None:
            omega_start = _centred_start(int(L), int(N))
        else:
            omega_start = tuple(_centred_start(l, n) for l, n in zip(Ls, _as_pair(N, "N")))
    transform = make_transform(L, N, omega_start)
    if conj_symmetric and transform.negation_map() is None:
        raise ValueError(f"support starting at {omega_start} is not symmetric about frequency 0")
    return transform


def _hermitian_part(z, perm):
    return 0.5 * (z + z[perm].conj())


def gen_bandpass_kernel(L, N, omega_start=0, seed=None, conj_symmetric=False,
                        max_coherence=None, max_tries=10000):
    """Random bandpass kernel with iid complex Gaussian spectrum, normalized.

    With ``conj_symmetric`` the support must be symmetric about frequency 0
    (``omega_start=None`` picks the centred support) and the spectrum is made
    Hermitian so that the time-domain kernel is real. ``max_coherence`` redraws
    until the coherence does not exceed the given value.
    """
    transform = _resolve_support(L, N, omega_start, conj_symmetric)
    perm = transform.negation_map() if conj_symmetric else None
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        z = rng.standard_normal(transform.N) + 1j * rng.standard_normal(transform.N)
        if perm is not None:
            z = _hermitian_part(z, perm)
        z = z / np.linalg.norm(z)
        k = BlurKernel(z, transform)
        if max_coherence is None or coherence(k) <= max_coherence:
            return k
    raise ValueError(f"no kernel with coherence <= {max_coherence} after {max_tries} draws")


def gen_coherent_kernel(L, N, mu, omega_start=0, seed=None, conj_symmetric=False):
    """Bandpass kernel with prescribed coherence ``mu`` and random phases.

    One frequency carries energy ``mu / L``; the rest of the unit energy is
    spread evenly. Requires ``L / N <= mu <= L``.
    """
    transform = _resolve_support(L, N, omega_start, conj_symmetric)
    Lt, Nt = transform.L, transform.N
    if not Lt / Nt * (1 - 1e-12) <= mu <= Lt * (1 + 1e-12):
        raise ValueError(f"coherence must lie in [L/N, L] = [{Lt / Nt:g}, {Lt}], got {mu}")
    rng = np.random.default_rng(seed)
    peak = mu / Lt
    perm = transform.negation_map() if conj_symmetric else None
    if perm is None:
        spots = [int(rng.integers(Nt))]
    else:
        fixed = np.flatnonzero(perm == np.arange(Nt))
        spot = int(rng.choice(fixed)) if fixed.size else int(rng.integers(Nt))
        spots = sorted({spot, int(perm[spot])})
    if len(spots) * peak > 1.0 + 1e-12:
        raise ValueError(f"coherence {mu} needs a self-conjugate frequency on this support")
    rest = Nt - len(spots)
    mag2 = np.full(Nt, (1.0 - len(spots) * peak) / rest if rest else 0.0)
    mag2[spots] = peak
    phase = np.exp(2j * np.pi * rng.uniform(size=Nt))
    if perm is not None:
        # self-conjugate frequencies end up with phase 0 or pi
        phase = np.exp(1j * np.angle(_hermitian_part(phase, perm)))
    z = np.sqrt(mag2) * phase
    z = z / np.linalg.norm(z)
    return BlurKernel(z, transform)


def coherence(k, L=None):
    """``L * max|freq|^2`` for a unit-norm spectrum."""
    if isinstance(k, BlurKernel):
        freq, L = k.freq, k.L
    else:
        freq = np.asarray(k)
        if L is None:
            raise ValueError("L is required when passing a raw spectrum")
        L = int(np.prod(L))
    norm = np.linalg.norm(freq)
    if abs(norm - 1.0) > NORM_TOL:
        raise ValueError(f"coherence needs a unit-norm spectrum, got norm {norm:.12g}")
    power = np.abs(freq.ravel()) ** 2
    # normalize by the computed energy and clip so rounding cannot leave [L/N, L]
    return float(np.clip(L * power.max() / power.sum(), L / power.size, L))


# --------------------------------------------------------------------------- masks


@dataclass(frozen=True, eq=False)
class MaskSet:
    """``L x K`` matrix of +-1 masks, one mask per column."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2:
            raise ValueError(f"mask entries must be L x K, got shape {e.shape}")
        if not np.all(np.abs(e) == 1.0):
            raise ValueError("mask entries must be +1 or -1")
        object.__setattr__(self, "entries", e)

    @property
    def L(self):
        return self.entries.shape[0]

    @property
    def K(self):
        return self.entries.shape[1]


def gen_rademacher_masks(L, K, seed=None):
    if L < 1 or K < 1:
        raise ValueError(f"need L, K >= 1, got L={L}, K={K}")
    rng = np.random.default_rng(seed)
    return MaskSet(2.0 * rng.integers(0, 2, size=(L, K)) - 1.0)


# --------------------------------------------------------------------------- subsampling


class Whitener:
    """LU-factored whitening matrix; ``solve`` applies its inverse to columns."""

    def __init__(self, blocks):
        self.blocks = [np.asarray(b) for b in blocks]
        self.cond = float(np.prod([np.linalg.cond(b) for b in self.blocks]))
        if not np.isfinite(self.cond) or self.cond > COND_LIMIT:
            raise SingularWhiteningError(self.cond)
        self._lu = [scipy.linalg.lu_factor(b) for b in self.blocks]

    @property
    def N(self):
        return int(np.prod([b.shape[0] for b in self.blocks]))

    def matrix(self):
        out = self.blocks[0]
        for b in self.blocks[1:]:
            out = np.kron(out, b)
        return out

    def inverse_norm(self):
        return float(np.prod([1.0 / np.linalg.svd(b, compute_uv=False)[-1] for b in self.blocks]))

    def solve(self, M):
        M = np.asarray(M)
        vec = M.ndim == 1
        if vec:
            M = M[:, None]
        if M.shape[0] != self.N:
            raise ValueError(f"expected {self.N} rows, got {M.shape[0]}")
        if len(self._lu) == 1:
            out = scipy.linalg.lu_solve(self._lu[0], M.astype(complex))
        else:
            n1, n2 = (b.shape[0] for b in self.blocks)
            Y = M.astype(complex).reshape(n1, n2, -1)
            Y = scipy.linalg.lu_solve(self._lu[0], Y.reshape(n1, -1)).reshape(n1, n2, -1)
            Y = np.swapaxes(Y, 0, 1).reshape(n2, -1)
            Y = scipy.linalg.lu_solve(self._lu[1], Y).reshape(n2, n1, -1)
            out = np.swapaxes(Y, 0, 1).reshape(n1 * n2, -1)
        return out[:, 0] if vec else out


@dataclass(frozen=True)
class SubsamplingScheme:
    """Uniform pointwise subsampling with period ``T`` of a length-``L`` signal."""

    L: int
    T: int

    def __post_init__(self):
        if self.L < 1 or not 1 <= self.T <= self.L:
            raise ValueError(f"need 1 <= T <= L, got L={self.L}, T={self.T}")

    @property
    def N(self):
        return (self.L - 1) // self.T + 1

    @property
    def grid(self):
        return (self.L,)

    @property
    def sample_indices(self):
        return np.arange(self.N) * self.T

    def sample(self, y):
        return np.asarray(y)[..., self.sample_indices]

    def whitening_matrix(self, transform):
        """``G F_omega^*``: the partial inverse DFT evaluated at the sample points."""
        if transform.L != self.L:
            raise ValueError(f"transform length {transform.L} != scheme length {self.L}")
        if transform.N != self.N:
            raise ValueError(f"support size {transform.N} != sample count {self.N}")
        j = self.sample_indices
        omega = np.asarray(transform.rows)
        return np.exp(2j * np.pi * np.outer(j, omega) / self.L) / np.sqrt(self.L)

    def whitener(self, transform):
        return _cached_whitener(self, transform)


@dataclass(frozen=True)
class SeparableSubsampling:
    """Row/column product of two 1D schemes on a row-major flattened grid."""

    axes: tuple

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        if len(self.axes) != 2:
            raise ValueError("separable subsampling needs exactly two axes")

    @property
    def L(self):
        return self.axes[0].L * self.axes[1].L

    @property
    def N(self):
        return self.axes[0].N * self.axes[1].N

    @property
    def T(self):
        return tuple(a.T for a in self.axes)

    @property
    def grid(self):
        return tuple(a.L for a in self.axes)

    @property
    def sample_indices(self):
        a, b = self.axes
        return (a.sample_indices[:, None] * b.L + b.sample_indices[None, :]).ravel()

    def sample(self, y):
        return np.asarray(y)[..., self.sample_indices]

    def whitening_matrix(self, transform):
        return np.kron(*self._blocks(transform))

    def _blocks(self, transform):
        if not isinstance(transform, SeparablePartialDFT):
            raise ValueError("2D subsampling needs a separable transform")
        return [a.whitening_matrix(f) for a, f in zip(self.axes, transform.factors)]

    def whitener(self, transform):
        return _cached_whitener(self, transform)


@functools.lru_cache(maxsize=64)
def _cached_whitener(scheme, transform):
    if isinstance(scheme, SeparableSubsampling):
        return Whitener(scheme._blocks(transform))
    return Whitener([scheme.whitening_matrix(transform)])


def build_subsampling(L, T):
    """Uniform subsampling; ``L`` and ``T`` may be pairs for a 2D grid."""
    Ls, Ts = _as_pair(L, "L"), _as_pair(T, "T")
    if Ls is None and Ts is None:
        return SubsamplingScheme(int(L), int(T))
    Ls = Ls or (int(L),) * 2
    Ts = Ts or (int(T),) * 2
    return SeparableSubsampling(tuple(SubsamplingScheme(l, t) for l, t in zip(Ls, Ts)))


# --------------------------------------------------------------------------- serialization


def save_kernel(path, k):
    """1D spectra are stored as an ``N x 1`` payload, 2D ones as ``N1 x N2``."""
    t = k.transform
    if isinstance(t, SeparablePartialDFT):
        payload = k.freq.reshape(t.factors[0].N, t.factors[1].N)
        aux, grid = k.omega_start, t.grid
    else:
        payload, aux, grid = k.freq[:, None], (k.omega_start, 0), (t.L, 1)
    binfmt.write_record(path, binfmt.KIND_KERNEL, payload, t.L, aux, grid)


def load_kernel(path):
    rec = binfmt.read_record(path, binfmt.KIND_KERNEL)
    if rec.grid[1] == 1:
        return BlurKernel.from_freq(rec.data[:, 0], rec.L, rec.aux[0])
    transform = make_transform(rec.grid, rec.data.shape, rec.aux)
    return BlurKernel(rec.data.ravel(), transform)


def save_masks(path, masks):
    binfmt.write_record(path, binfmt.KIND_MASKS, masks.entries, masks.L)


def load_masks(path):
    rec = binfmt.read_record(path, binfmt.KIND_MASKS)
    return MaskSet(rec.data)


def format_number(z):
    z = complex(z)
    if z.imag == 0:
        return repr(z.real)
    return f"{z.real!r}{'+' if z.imag >= 0 or np.isnan(z.imag) else '-'}{abs(z.imag)!r}j"


def write_csv(path, rows, header=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(header)
        for row in rows:
            w.writerow([format_number(v) if not isinstance(v, str) else v for v in row])


def export_kernel_csv(path, k):
    rows = [[str(f), z.real, z.imag] for f, z in zip(k.omega, k.freq)]
    write_csv(path, rows, header=["frequency", "re", "im"])


def export_masks_csv(path, masks):
    write_csv(path, masks.entries.astype(int).astype(str).tolist(),
              header=[f"mask{k}" for k in range(masks.K)])
