"""Forward measurement model ``M = G H D_x Phi`` and the lifted operator.

With the unitary DFT convention the circulant blur on the support ``omega``
factors as ``H = F_omega^* diag(sqrt(L) freq) F_omega``, so

    G^~^{-1} M = sqrt(L) (F_omega . (freq x^T)) Phi,

and the whitened data ``M~ = G^~^{-1} M / sqrt(K)`` equals ``A(freq x^T)`` with
``A(X) = sqrt(L/K) (F_omega . X) Phi``. See ``docs/conventions.md``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import binfmt
from .model import BlurKernel, SeparableSubsampling, build_subsampling, write_csv
from .spectral_core import circular_convolve


def _values(obj, attr):
    return np.asarray(getattr(obj, attr)) if hasattr(obj, attr) else np.asarray(obj)


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Raw sensor data: column ``k`` holds the samples taken under mask ``k``."""

    M: np.ndarray
    scheme: object

    def __post_init__(self):
        M = np.asarray(self.M)
        if M.ndim != 2 or M.shape[0] != self.scheme.N:
            raise ValueError(f"M must have {self.scheme.N} rows, got shape {M.shape}")
        object.__setattr__(self, "M", M)

    @property
    def K(self):
        return self.M.shape[1]


@dataclass(frozen=True, eq=False)
class WhitenedMeasurements:
    Mtil: np.ndarray

    @property
    def shape(self):
        return self.Mtil.shape


def measure(x, h, Phi, scheme):
    """Dense-array forward model: subsampled circular blur of each masked copy."""
    x = np.asarray(x)
    h = np.asarray(h)
    Phi = np.asarray(Phi)
    L = scheme.L
    if x.shape != (L,) or h.shape != (L,) or Phi.ndim != 2 or Phi.shape[0] != L:
        raise ValueError(
            f"dimension mismatch: L={L}, x {x.shape}, h {h.shape}, Phi {Phi.shape}"
        )
    shape = scheme.grid if isinstance(scheme, SeparableSubsampling) else None
    blurred = circular_convolve(h, x[None, :] * Phi.T, shape=shape)
    return scheme.sample(blurred).T


def forward_measure(x, k, masks, scheme):
    """Simulate ``M = G H D_x Phi``.

    Parameters
    ----------
    x : Image or ndarray
        Scene of length ``L``.
    k : BlurKernel or ndarray
        Blur kernel; arrays are taken as the time-domain kernel ``h``.
    masks : MaskSet or ndarray
        ``L x K`` mask matrix.
    scheme : SubsamplingScheme or SeparableSubsampling
    """
    h = k.h if isinstance(k, BlurKernel) else np.asarray(k)
    M = measure(_values(x, "values"), h, _values(masks, "entries"), scheme)
    return MeasurementSet(M, scheme)


def whiten(meas, transform):
    """``M~ = G^~^{-1} M / sqrt(K)`` for the kernel support ``transform``.

    ``transform`` may also be a :class:`BlurKernel`, whose support is used.
    Raises :class:`~maskdeconv.model.SingularWhiteningError` when the whitening
    matrix is numerically singular.
    """
    if isinstance(transform, BlurKernel):
        transform = transform.transform
    W = meas.scheme.whitener(transform)
    return WhitenedMeasurements(W.solve(meas.M) / np.sqrt(meas.K))


@dataclass(frozen=True, eq=False)
class LiftedOperator:
    """``A(X) = scale * (F . X) Phi`` mapping ``N x L`` to ``N x K`` matrices."""

    transform: object
    masks: np.ndarray
    scale: float

    def __post_init__(self):
        Phi = np.asarray(self.masks, dtype=np.float64)
        if Phi.ndim != 2 or Phi.shape[0] != self.transform.L:
            raise ValueError(f"masks must be {self.transform.L} x K, got shape {Phi.shape}")
        object.__setattr__(self, "masks", Phi)

    @property
    def N(self):
        return self.transform.N

    @property
    def L(self):
        return self.transform.L

    @property
    def K(self):
        return self.masks.shape[1]

    @property
    def in_shape(self):
        return (self.N, self.L)

    @property
    def out_shape(self):
        return (self.N, self.K)

    @functools.cached_property
    def F(self):
        return self.transform.matrix()

    def apply(self, X):
        X = np.asarray(X)
        if X.shape != self.in_shape:
            raise ValueError(f"X must have shape {self.in_shape}, got {X.shape}")
        return self.scale * ((self.F * X) @ self.masks)

    def adjoint(self, Y):
        Y = np.asarray(Y)
        if Y.shape != self.out_shape:
            raise ValueError(f"Y must have shape {self.out_shape}, got {Y.shape}")
        return self.scale * (self.F.conj() * (Y @ self.masks.T))

    # Factored forms; never materialize the N x L matrix. Used for large grids.

    def _masked_spectra(self, V):
        # (r, K, N): F_omega (conj(v_r) * phi_k)
        return self.transform.apply(V.conj().T[:, None, :] * self.masks.T[None, :, :])

    def apply_factored(self, U, V):
        """``A(U V^*)`` for ``U`` (N x r) and ``V`` (L x r)."""
        B = self._masked_spectra(V)
        return self.scale * np.einsum("nr,rkn->nk", U, B)

    def adjoint_times(self, Y, V):
        """``A^*(Y) V``."""
        B = self._masked_spectra(V)
        return self.scale * np.einsum("nk,rkn->nr", Y, B.conj())

    def adjoint_h_times(self, Y, U):
        """``A^*(Y)^* U``."""
        D = self.transform.adjoint(Y.T[None, :, :] * U.conj().T[:, None, :])
        return self.scale * np.einsum("lk,rkl->lr", self.masks, D.conj())

    def norm(self):
        """Operator norm; rows decouple so it equals ``sigma_max(Phi) / sqrt(K)`` for the full set."""
        return self.scale / np.sqrt(self.L) * float(np.linalg.svd(self.masks, compute_uv=False)[0])


def make_operator(transform, masks):
    """Lifted operator for a kernel support and mask set, scaled by ``sqrt(L/K)``."""
    if isinstance(transform, BlurKernel):
        transform = transform.transform
    Phi = _values(masks, "entries")
    return LiftedOperator(transform, Phi, float(np.sqrt(transform.L / Phi.shape[1])))


def lifted_apply(op, X):
    return op.apply(X)


def lifted_adjoint(op, Y):
    return op.adjoint(Y)


def restrict_operator(op, subset):
    """Operator on the mask columns ``subset`` with scale ``sqrt(L/|subset|)``."""
    subset = np.asarray(list(subset), dtype=np.intp)
    if subset.size == 0:
        raise ValueError("mask subset must be nonempty")
    if len(set(subset.tolist())) != subset.size:
        raise ValueError("mask subset has repeated indices")
    if subset.min() < 0 or subset.max() >= op.K:
        raise ValueError(f"mask indices must lie in 0..{op.K - 1}")
    return LiftedOperator(op.transform, op.masks[:, subset], float(np.sqrt(op.L / subset.size)))


def lifted_truth(kernel, image):
    """The lifted ground truth ``freq x^T`` (that is ``h^ xbar^*``)."""
    freq = kernel.freq if isinstance(kernel, BlurKernel) else np.asarray(kernel)
    return np.outer(freq, _values(image, "values"))


# --------------------------------------------------------------------------- serialization


def save_measurements(path, meas):
    scheme = meas.scheme
    T = scheme.T
    aux = (T, 0) if np.ndim(T) == 0 else T
    grid = scheme.grid if len(scheme.grid) == 2 else (scheme.L, 1)
    binfmt.write_record(path, binfmt.KIND_MEASUREMENTS, meas.M, scheme.L, aux, grid)


def load_measurements(path):
    rec = binfmt.read_record(path, binfmt.KIND_MEASUREMENTS)
    if rec.grid[1] == 1:
        scheme = build_subsampling(rec.L, rec.aux[0])
    else:
        scheme = build_subsampling(rec.grid, rec.aux)
    return MeasurementSet(rec.data, scheme)


def export_measurements_csv(path, meas):
    write_csv(path, meas.M.tolist(), header=[f"mask{k}" for k in range(meas.K)])
