"""Recovery of the lifted matrix ``freq x^T``: spectral method and nuclear-norm minimization."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.optimize

from .model import BlurKernel
from .spectral_core import RankOne, best_rank_one

log = logging.getLogger(__name__)

# Above this many lifted entries the solver switches to FFT-based factored products.
DENSE_LIMIT = 1 << 21
UNIT_TOL = 1e-10


# --------------------------------------------------------------------------- tangent space


@dataclass(frozen=True, eq=False)
class TangentSpace:
    """The subspace ``{hhat v^* + u xbar^*}`` at a unit-norm pair."""

    hhat: np.ndarray
    xbar: np.ndarray

    def __post_init__(self):
        for name in ("hhat", "xbar"):
            vec = np.asarray(getattr(self, name), dtype=complex)
            if vec.ndim != 1:
                raise ValueError(f"{name} must be a vector")
            if abs(np.linalg.norm(vec) - 1.0) > UNIT_TOL:
                raise ValueError(f"{name} must have unit l2-norm, got {np.linalg.norm(vec):.12g}")
            object.__setattr__(self, name, vec)

    @classmethod
    def at(cls, kernel, image):
        """Tangent space at the ground truth of a kernel and an image."""
        freq = kernel.freq if isinstance(kernel, BlurKernel) else kernel
        x = getattr(image, "values", image)
        return cls(np.asarray(freq), np.conj(np.asarray(x)))

    def _check(self, S):
        S = np.asarray(S)
        if S.shape != (self.hhat.size, self.xbar.size):
            raise ValueError(f"expected shape {(self.hhat.size, self.xbar.size)}, got {S.shape}")
        return S

    def element(self, u, v):
        """``hhat v^* + u xbar^*``."""
        return np.outer(self.hhat, np.conj(v)) + np.outer(u, self.xbar.conj())


def project_T(ts, S):
    S = ts._check(S)
    h, xb = ts.hhat, ts.xbar
    hS = np.outer(h, h.conj() @ S)
    Sx = np.outer(S @ xb, xb.conj())
    hSx = np.outer(h, (h.conj() @ S @ xb) * xb.conj())
    return hS + Sx - hSx


def project_Tperp(ts, S):
    S = ts._check(S)
    h, xb = ts.hhat, ts.xbar
    R = S - np.outer(h, h.conj() @ S)
    return R - np.outer(R @ xb, xb.conj())


def certificate_diagnostics(ts, Y, op=None):
    """Probe a candidate dual certificate ``Y``.

    Returns ``||P_T(Y) - hhat xbar^*||_F`` and the spectral norm of
    ``P_Tperp(Y)``. With an operator, also reports ``||A||`` and whether the
    sufficient conditions ``sqrt(2)||A|| on_T <= 1/4`` and ``on_Tperp < 3/4``
    hold. Certificate construction itself is not provided.
    """
    truth = np.outer(ts.hhat, ts.xbar.conj())
    out = {
        "on_T": float(np.linalg.norm(project_T(ts, Y) - truth)),
        "on_Tperp": float(np.linalg.norm(project_Tperp(ts, Y), 2)),
    }
    out["on_Tperp_ok"] = out["on_Tperp"] < 0.75
    if op is not None:
        out["op_norm"] = op.norm()
        out["on_T_ok"] = np.sqrt(2) * out["op_norm"] * out["on_T"] <= 0.25
    return out


# --------------------------------------------------------------------------- metrics and factors


def lifted_relative_error(X_est, hhat, x):
    """``||X_est - hhat x^T||_F / ||hhat x^T||_F`` (``hhat x^T`` is ``hhat xbar^*``)."""
    truth = np.outer(np.asarray(hhat), np.asarray(getattr(x, "values", x)))
    X_est = np.asarray(X_est)
    if X_est.shape != truth.shape:
        raise ValueError(f"estimate has shape {X_est.shape}, truth has {truth.shape}")
    ref = np.linalg.norm(truth)
    if ref == 0:
        raise ValueError("ground truth is zero")
    return float(np.linalg.norm(X_est - truth) / ref)


def extract_factors(sol, convention="unit"):
    """Split a rank-one estimate ``sigma u v^*`` into ``(hhat, x)``.

    ``convention="balanced"`` returns ``(sqrt(sigma) u, conj(sqrt(sigma) v))``.
    ``convention="unit"`` rescales to ``||hhat|| = 1`` and rotates the global
    phase so the largest-magnitude entry of ``x`` is real and positive.
    """
    u, v, sigma = (sol.u, sol.v, sol.sigma)
    if sigma <= 0:
        raise ValueError("cannot factor a zero estimate")
    h = np.sqrt(sigma) * np.asarray(u)
    x = np.conj(np.sqrt(sigma) * np.asarray(v))
    if convention == "balanced":
        return h, x
    if convention != "unit":
        raise ValueError(f"unknown convention {convention!r}")
    c = np.linalg.norm(h)
    h, x = h / c, x * c
    pivot = int(np.argmax(np.abs(x)))
    phase = x[pivot] / abs(x[pivot])
    return h * phase, x / phase


def align_factors(hhat_est, x_est, hhat_ref, x_ref):
    """Remove the global gauge ``(c h, x / c)`` by least squares against a reference.

    Returns relative errors of the aligned kernel spectrum and image.
    """
    hhat_est = np.asarray(hhat_est)
    x_ref = np.asarray(getattr(x_ref, "values", x_ref))
    c = np.vdot(hhat_est, hhat_ref) / np.vdot(hhat_est, hhat_est)
    h_err = np.linalg.norm(c * hhat_est - hhat_ref) / np.linalg.norm(hhat_ref)
    x_err = np.linalg.norm(np.asarray(x_est) / c - x_ref) / np.linalg.norm(x_ref)
    return float(h_err), float(x_err)


# --------------------------------------------------------------------------- spectral method


@dataclass(frozen=True, eq=False)
class SpectralResult:
    hhat: np.ndarray
    x: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    rank_one: RankOne
    err_bound: float = None


def spectral_recover(meas, transform, E=None):
    """Closed-form estimate from ``Phi = I`` data.

    Forms ``Z = sqrt(L) conj(F_omega) . (G^~^{-1} M)``, which equals
    ``freq x^T`` plus a noise term, and keeps its best rank-one part. When the
    measurement error ``E`` is supplied the guaranteed bound
    ``2 sqrt(L) ||conj(F_omega) . (G^~^{-1} E)||_F`` on the lifted error is
    reported.
    """
    if isinstance(transform, BlurKernel):
        transform = transform.transform
    M = np.asarray(meas.M)
    L = transform.L
    if M.shape != (transform.N, L):
        raise ValueError(f"spectral recovery needs N x L = {(transform.N, L)} data, got {M.shape}")
    W = meas.scheme.whitener(transform)
    Fbar = transform.matrix().conj()
    Z = np.sqrt(L) * Fbar * W.solve(M)
    r1 = best_rank_one(Z)
    bound = None
    if E is not None:
        bound = float(2 * np.sqrt(L) * np.linalg.norm(Fbar * W.solve(np.asarray(E))))
    hhat, x = extract_factors(r1) if r1.sigma > 0 else (np.zeros(transform.N), np.zeros(L))
    return SpectralResult(hhat, x, r1.matrix(), Z, r1, bound)


# --------------------------------------------------------------------------- nuclear-norm solver


@dataclass
class SolverConfig:
    """Settings of the factorized augmented-Lagrangian solver.

    ``delta`` > 0 replaces the equality constraint by ``||A(X) - M~||_F <= delta``.
    Tolerances are relative to ``||M~||_F``.
    """

    rank: int = 2
    feas_tol: float = 1e-8
    obj_tol: float = 1e-10
    max_outer: int = 200
    max_inner: int = 500
    inner: str = "lbfgs"
    rho0: float = 1.0
    rho_growth: float = 2.0
    rho_max: float = 1e8
    inner_gtol: float = 1e-10
    delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.inner not in ("lbfgs", "gd"):
            raise ValueError(f"inner solver must be 'lbfgs' or 'gd', got {self.inner!r}")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration caps must be positive")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class LiftedSolution:
    X: np.ndarray
    u: np.ndarray
    v: np.ndarray
    sigma: float
    residual: float
    iterations: int
    converged: bool
    objective: float = 0.0
    inner_iterations: int = 0
    trace: list = field(default_factory=list)

    @property
    def rank_one(self):
        return RankOne(self.u, self.v, self.sigma)


def write_trace(path, sol):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "residual"])
        for it, obj, res in sol.trace:
            w.writerow([it, repr(obj), repr(res)])


def _truncate(U, V, scale):
    qu, ru = np.linalg.qr(U)
    qv, rv = np.linalg.qr(V)
    a, s, bh = np.linalg.svd(ru @ rv.conj().T)
    return qu @ a[:, 0], qv @ bh[0].conj(), float(scale * s[0])


class _Problem:
    """Augmented Lagrangian of ``min 1/2(||U||^2 + ||V||^2)  s.t.  A(UV^*) = b``."""

    def __init__(self, op, b, delta, dense):
        self.op, self.b, self.delta, self.dense = op, b, delta, dense
        self.N, self.L = op.in_shape
        self.lam = np.zeros_like(b)
        self.rho = 1.0

    def unpack(self, z, r):
        n = self.N * r
        c = z.view(complex)
        return c[:n].reshape(self.N, r), c[n:].reshape(self.L, r)

    def constraint(self, U, V):
        if self.dense:
            return self.op.apply(U @ V.conj().T) - self.b
        return self.op.apply_factored(U, V) - self.b

    def shifted(self, c):
        w = c - self.lam / self.rho
        if self.delta > 0:
            nw = np.linalg.norm(w)
            if nw > self.delta:
                w = w * (1.0 - self.delta / nw)
            else:
                w = np.zeros_like(w)
        return w

    def infeasibility(self, c):
        nc = np.linalg.norm(c)
        return max(nc - self.delta, 0.0) if self.delta > 0 else nc

    def value_grad(self, z, r):
        U, V = self.unpack(z, r)
        w = self.shifted(self.constraint(U, V))
        f = 0.5 * (np.vdot(U, U).real + np.vdot(V, V).real) + 0.5 * self.rho * np.vdot(w, w).real
        Y = self.rho * w
        if self.dense:
            G = self.op.adjoint(Y)
            gU = U + G @ V
            gV = V + G.conj().T @ U
        else:
            gU = U + self.op.adjoint_times(Y, V)
            gV = V + self.op.adjoint_h_times(Y, U)
        g = np.concatenate([gU.ravel(), gV.ravel()]).view(np.float64)
        return f, g


def _gradient_descent(fun, z, max_iter, gtol, step=1.0):
    f, g = fun(z)
    it = 0
    for it in range(1, max_iter + 1):
        gg = g @ g
        if np.sqrt(gg) <= gtol:
            break
        t = step * 2.0
        while True:
            z_new = z - t * g
            f_new, g_new = fun(z_new)
            if f_new <= f - 0.5 * t * gg or t < 1e-20:
                break
            t *= 0.5
        z, f, g, step = z_new, f_new, g_new, t
    return z, it, step


def nucmin_solve(op, Mtil, cfg=None):
    """Approximately solve ``min ||X||_*  s.t.  A(X) = M~`` with ``X = U V^*``.

    The nuclear norm is replaced by ``1/2 (||U||_F^2 + ||V||_F^2)`` and the
    constraint handled by an augmented Lagrangian whose penalty doubles each
    outer iteration (capped at ``cfg.rho_max``). Inner problems run L-BFGS (or
    gradient descent with backtracking) over the real and imaginary parts of
    the factors. Data are normalized to unit Frobenius norm internally.
    """
    cfg = cfg or SolverConfig()
    Mtil = np.asarray(getattr(Mtil, "Mtil", Mtil))
    if Mtil.shape != op.out_shape:
        raise ValueError(f"data must have shape {op.out_shape}, got {Mtil.shape}")
    N, L = op.in_shape
    scale = float(np.linalg.norm(Mtil))
    if scale == 0.0:
        zN, zL = np.zeros(N, complex), np.zeros(L, complex)
        zN[0] = zL[0] = 1.0
        return LiftedSolution(np.zeros((N, L), complex), zN, zL, 0.0, 0.0, 0, True)

    r = cfg.rank
    prob = _Problem(op, Mtil / scale, cfg.delta / scale, N * L <= DENSE_LIMIT)
    prob.rho = cfg.rho0
    rng = np.random.default_rng(cfg.seed)
    init = 1.0 / (N * op.K) ** 0.25
    U = init * (rng.standard_normal((N, r)) + 1j * rng.standard_normal((N, r))) / np.sqrt(2)
    V = init * (rng.standard_normal((L, r)) + 1j * rng.standard_normal((L, r))) / np.sqrt(2)
    z = np.concatenate([U.ravel(), V.ravel()]).view(np.float64).copy()

    fun = lambda zz: prob.value_grad(zz, r)  # noqa: E731
    trace = []
    obj_prev = np.inf
    converged = False
    inner_total = 0
    step = 1.0
    t0 = time.perf_counter()
    it = 0
    for it in range(1, cfg.max_outer + 1):
        if cfg.inner == "lbfgs":
            res = scipy.optimize.minimize(
                fun, z, jac=True, method="L-BFGS-B",
                options={"maxiter": cfg.max_inner, "gtol": cfg.inner_gtol, "ftol": 1e-16,
                         "maxcor": 20},
            )
            z, n_inner = res.x, res.nit
        else:
            z, n_inner, step = _gradient_descent(fun, z, cfg.max_inner, cfg.inner_gtol, step)
        inner_total += n_inner
        U, V = prob.unpack(z, r)
        c = prob.constraint(U, V)
        infeas = prob.infeasibility(c)
        obj = 0.5 * (np.vdot(U, U).real + np.vdot(V, V).real)
        trace.append((it, obj * scale, infeas * scale))
        log.debug("outer %d: obj %.6e infeas %.3e rho %.1e inner %d", it, obj, infeas, prob.rho, n_inner)
        rel_change = abs(obj - obj_prev) / max(obj, 1e-300)
        if infeas <= cfg.feas_tol and rel_change <= cfg.obj_tol:
            converged = True
            break
        obj_prev = obj
        prob.lam = -prob.rho * prob.shifted(c)
        prob.rho = min(prob.rho * cfg.rho_growth, cfg.rho_max)

    U, V = prob.unpack(z, r)
    X = scale * (U @ V.conj().T)
    u, v, sigma = _truncate(U, V, scale)
    residual = float(prob.infeasibility(prob.constraint(U, V)) * scale)
    log.debug("solver finished in %.2fs after %d outer iterations", time.perf_counter() - t0, it)
    return LiftedSolution(
        X, u, v, sigma, residual, it, converged,
        objective=float(0.5 * (np.vdot(U, U).real + np.vdot(V, V).real) * scale),
        inner_iterations=inner_total, trace=trace,
    )
