"""Seeded experiments, phase-transition sweeps and image file I/O."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .identifiability import (
    build_graph,
    check_identifiable,
    check_subspace_condition,
    observation_pattern,
)
from .measurement import MeasurementSet, forward_measure, lifted_truth, make_operator, measure, whiten
from .model import (
    Image,
    build_subsampling,
    coherence,
    gen_bandpass_kernel,
    gen_coherent_kernel,
    gen_image,
    gen_rademacher_masks,
)
from .recovery import (
    SolverConfig,
    align_factors,
    extract_factors,
    lifted_relative_error,
    nucmin_solve,
    spectral_recover,
)

log = logging.getLogger(__name__)

SWEEP_SCHEMA_VERSION = 1
SWEEP_HEADER = ("K", "N_blur", "mu_factor", "mu_mean", "success_rate", "mean_error", "trials")
TRIAL_HEADER = ("seed", "lifted_rel_error", "h_error", "x_error", "residual", "iterations",
                "converged", "coherence", "success")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- configuration


def _parse_list(text, conv):
    return tuple(conv(t) for t in re.split(r"[,\s]+", text.strip()) if t)


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_opt_int(text):
    return None if str(text).strip().lower() in ("auto", "none", "") else int(text)


def _parse_opt_float(text):
    return None if str(text).strip().lower() in ("none", "") else float(text)


@dataclass
class ExperimentConfig:
    """One synthetic experiment; sweeps vary K, N_blur and the coherence target."""

    L: int = 128
    T: int = 3
    N_blur: Optional[int] = None
    omega_start: Optional[int] = 0
    K: int = 50
    seed: int = 0
    noise_level: float = 0.0
    trials: int = 1
    output_dir: str = "out"
    dims: int = 1
    image: str = "gaussian"
    kernel: str = "gaussian"
    mu_factor: Optional[float] = None
    max_mu_factor: Optional[float] = None
    conj_symmetric: bool = False
    success_threshold: float = 1e-4
    solver: SolverConfig = field(default_factory=SolverConfig)
    sweep_K: tuple = ()
    sweep_mu_factor: tuple = ()
    sweep_N_blur: tuple = ()

    _PARSERS = {
        "L": int, "T": int, "N_blur": _parse_opt_int, "omega_start": _parse_opt_int,
        "K": int, "seed": int, "noise_level": float, "trials": int, "output_dir": str,
        "dims": int, "image": str, "kernel": str, "mu_factor": _parse_opt_float,
        "max_mu_factor": _parse_opt_float, "conj_symmetric": _parse_bool,
        "success_threshold": float,
        "sweep.K": lambda s: _parse_list(s, int),
        "sweep.mu_factor": lambda s: _parse_list(s, float),
        "sweep.N_blur": lambda s: _parse_list(s, int),
    }
    _SOLVER_PARSERS = {
        "rank": int, "feas_tol": float, "obj_tol": float, "max_outer": int, "max_inner": int,
        "inner": str, "rho0": float, "rho_growth": float, "rho_max": float,
        "inner_gtol": float, "delta": float, "seed": int,
    }

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if self.dims not in (1, 2):
            raise ConfigError(f"dims must be 1 or 2, got {self.dims}")
        if self.kernel not in ("gaussian", "coherent", "flat"):
            raise ConfigError(f"kernel must be gaussian, coherent or flat, got {self.kernel!r}")
        if self.kernel == "coherent" and self.mu_factor is None:
            raise ConfigError("kernel = coherent needs mu_factor")
        if self.L < 1 or not 1 <= self.T <= self.L:
            raise ConfigError(f"need 1 <= T <= L, got L={self.L}, T={self.T}")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be nonnegative")
        if self.N_blur is not None:
            if self.N_blur > self.L:
                raise ConfigError(f"N_blur={self.N_blur} exceeds L={self.L}")
            if self.N_blur != self.samples:
                raise ConfigError(
                    f"N_blur={self.N_blur} must equal the per-axis sample count "
                    f"floor((L-1)/T)+1 = {self.samples}"
                )
        for K in self.sweep_K:
            if K < 1:
                raise ConfigError("sweep.K values must be >= 1")
        return self

    @property
    def samples(self):
        return (self.L - 1) // self.T + 1

    @classmethod
    def from_text(cls, text, source="<config>"):
        values, solver = {}, {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, val = (p.strip() for p in line.split("=", 1))
            try:
                if key.startswith("solver."):
                    name = key[len("solver."):]
                    if name not in cls._SOLVER_PARSERS:
                        raise ConfigError(f"{source}:{lineno}: unknown solver key {name!r}")
                    solver[name] = cls._SOLVER_PARSERS[name](val)
                elif key in cls._PARSERS:
                    values[key.replace("sweep.", "sweep_")] = cls._PARSERS[key](val)
                else:
                    raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        try:
            values["solver"] = SolverConfig(**solver)
            return cls(**values)
        except ValueError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read(), source=str(path))

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "solver":
                continue
            val = getattr(self, f.name)
            key = f.name.replace("sweep_", "sweep.")
            if isinstance(val, tuple):
                if not val:
                    continue
                val = ", ".join(str(v) for v in val)
            elif val is None:
                if f.name == "omega_start":
                    val = "auto"
                else:
                    continue
            lines.append(f"{key} = {val}")
        for f in dataclasses.fields(self.solver):
            lines.append(f"solver.{f.name} = {getattr(self.solver, f.name)}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------- instances


@dataclass(eq=False)
class Instance:
    image: Image
    kernel: object
    masks: object
    scheme: object
    measurements: object
    noise: np.ndarray = None


def _grid(cfg, image):
    if image is not None and len(image.shape) == 2:
        return image.shape
    return (cfg.L, cfg.L) if cfg.dims == 2 else cfg.L


def make_kernel(cfg, grid, scheme, rng):
    two_d = hasattr(scheme, "axes")
    N = tuple(a.N for a in scheme.axes) if two_d else scheme.N
    start = cfg.omega_start
    if two_d and start is not None:
        start = (start, start)
    L_total, N_total = int(np.prod(grid)), int(np.prod(N))
    if cfg.kernel == "gaussian":
        cap = None if cfg.max_mu_factor is None else cfg.max_mu_factor * L_total / N_total
        return gen_bandpass_kernel(grid, N, start, seed=rng, conj_symmetric=cfg.conj_symmetric,
                                   max_coherence=cap)
    mu = L_total / N_total * (1.0 if cfg.kernel == "flat" else cfg.mu_factor)
    return gen_coherent_kernel(grid, N, mu, start, seed=rng, conj_symmetric=cfg.conj_symmetric)


def make_instance(cfg, rng, image=None):
    """Draw image (unless given), kernel and masks; simulate noisy measurements."""
    if image is None:
        if cfg.image in ("gaussian", "uniform", "complex"):
            image = gen_image((cfg.L, cfg.L) if cfg.dims == 2 else cfg.L, seed=rng, kind=cfg.image)
        else:
            image = read_pgm(cfg.image)
    grid = _grid(cfg, image)
    scheme = build_subsampling(grid, cfg.T)
    kernel = make_kernel(cfg, grid, scheme, rng)
    masks = gen_rademacher_masks(image.L, cfg.K, seed=rng)
    meas = forward_measure(image, kernel, masks, scheme)
    noise = None
    if cfg.noise_level > 0:
        noise = rng.standard_normal(meas.M.shape)
        if np.iscomplexobj(meas.M):
            noise = noise + 1j * rng.standard_normal(meas.M.shape)
        noise *= cfg.noise_level * np.linalg.norm(meas.M) / np.linalg.norm(noise)
        meas = type(meas)(meas.M + noise, scheme)
    return Instance(image, kernel, masks, scheme, meas, noise)


# --------------------------------------------------------------------------- trials


@dataclass(frozen=True)
class TrialResult:
    seed: object
    lifted_rel_error: float
    h_error: float
    x_error: float
    residual: float
    iterations: int
    converged: bool
    coherence: float
    success: bool
    threshold: float
    wall_time: float = field(default=0.0, compare=False)

    def row(self):
        seed = self.seed if np.ndim(self.seed) == 0 else "-".join(str(s) for s in self.seed)
        return (seed, repr(self.lifted_rel_error), repr(self.h_error), repr(self.x_error),
                repr(self.residual), self.iterations, int(self.converged),
                repr(self.coherence), int(self.success))


def _entropy(trial_seed):
    if np.ndim(trial_seed) == 0:
        return int(trial_seed)
    return [int(s) for s in trial_seed]


def solve_instance(cfg, inst, solver_seed):
    op = make_operator(inst.kernel, inst.masks)
    Mtil = whiten(inst.measurements, inst.kernel)
    return nucmin_solve(op, Mtil, dataclasses.replace(cfg.solver, seed=solver_seed))


def score(cfg, inst, sol, trial_seed, wall_time=0.0):
    err = lifted_relative_error(sol.X, inst.kernel.freq, inst.image)
    if sol.sigma > 0:
        h_est, x_est = extract_factors(sol)
        h_err, x_err = align_factors(h_est, x_est, inst.kernel.freq, inst.image)
    else:
        h_err = x_err = 1.0
    return TrialResult(
        seed=trial_seed if np.ndim(trial_seed) == 0 else tuple(_entropy(trial_seed)),
        lifted_rel_error=err, h_error=h_err, x_error=x_err, residual=sol.residual,
        iterations=sol.iterations, converged=sol.converged,
        coherence=coherence(inst.kernel), success=err < cfg.success_threshold,
        threshold=cfg.success_threshold, wall_time=wall_time,
    )


def run_trial(cfg, trial_seed):
    """Generate, simulate, whiten, solve and score one seeded trial."""
    cfg.validate()
    t0 = time.perf_counter()
    with threadpool_limits(1):
        rng = np.random.default_rng(_entropy(trial_seed))
        inst = make_instance(cfg, rng)
        solver_seed = int(rng.integers(2**31))
        sol = solve_instance(cfg, inst, solver_seed)
        return score(cfg, inst, sol, trial_seed, time.perf_counter() - t0)


def _trial_task(args):
    cfg, trial_seed = args
    return run_trial(cfg, trial_seed)


def run_many(tasks, threads=1):
    """Run ``(cfg, seed)`` tasks; results come back in task order."""
    if threads <= 1 or len(tasks) <= 1:
        return [_trial_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_trial_task, tasks, chunksize=1))


def run_trials(cfg, threads=1):
    tasks = [(cfg, (cfg.seed, 0, t)) for t in range(cfg.trials)]
    return run_many(tasks, threads)


def write_trials_csv(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRIAL_HEADER)
        for r in results:
            w.writerow(r.row())


# --------------------------------------------------------------------------- spectral trials


@dataclass(frozen=True)
class SpectralTrial:
    seed: object
    lifted_rel_error: float
    err_bound: float
    within_bound: bool


def spectral_trial(cfg, trial_seed):
    """One ``Phi = I`` instance recovered by the closed-form spectral method."""
    cfg.validate()
    rng = np.random.default_rng(_entropy(trial_seed))
    if cfg.dims != 1:
        raise ConfigError("the spectral method is implemented for 1D signals")
    image = gen_image(cfg.L, seed=rng, kind=cfg.image if cfg.image in ("gaussian", "uniform", "complex")
                      else "gaussian")
    scheme = build_subsampling(cfg.L, cfg.T)
    kernel = make_kernel(cfg, cfg.L, scheme, rng)
    M = measure(image.values, kernel.h, np.eye(cfg.L), scheme)
    E = np.zeros_like(M)
    if cfg.noise_level > 0:
        E = rng.standard_normal(M.shape) + 1j * rng.standard_normal(M.shape)
        E *= cfg.noise_level * np.linalg.norm(M) / np.linalg.norm(E)
    res = spectral_recover(MeasurementSet(M + E, scheme), kernel, E=E)
    err = lifted_relative_error(res.X, kernel.freq, image)
    bound = res.err_bound / np.linalg.norm(lifted_truth(kernel, image))
    seed = trial_seed if np.ndim(trial_seed) == 0 else tuple(_entropy(trial_seed))
    # round-off allowance so noiseless data (bound 0) count as within bound
    return SpectralTrial(seed, err, float(bound), bool(err <= bound + 1e-13))


# --------------------------------------------------------------------------- sweeps


def period_for_samples(L, N):
    """A sampling period giving exactly ``N`` samples, or an error."""
    for T in range(1, L + 1):
        if (L - 1) // T + 1 == N:
            return T
    raise ConfigError(f"no sampling period yields N_blur={N} samples for L={L}")


def sweep_cells(cfg):
    Ks = cfg.sweep_K or (cfg.K,)
    Ns = cfg.sweep_N_blur or (cfg.samples,)
    mus = cfg.sweep_mu_factor or ((cfg.mu_factor,) if cfg.kernel == "coherent" else (None,))
    cells = []
    for N in Ns:
        T = period_for_samples(cfg.L, N)
        for mu in mus:
            for K in Ks:
                changes = {"K": K, "T": T, "N_blur": N}
                if mu is not None:
                    changes.update(kernel="coherent", mu_factor=mu)
                cells.append(cfg.replace(**changes).validate())
    if not cells:
        raise ConfigError("empty sweep grid")
    return cells


def sweep(cfg, threads=1):
    """Success statistics per grid cell, in deterministic grid order."""
    cells = sweep_cells(cfg)
    tasks = [(c, (cfg.seed, ci, t)) for ci, c in enumerate(cells) for t in range(cfg.trials)]
    results = run_many(tasks, threads)
    rows = []
    for ci, c in enumerate(cells):
        chunk = results[ci * cfg.trials:(ci + 1) * cfg.trials]
        rows.append({
            "K": c.K,
            "N_blur": c.N_blur,
            "mu_factor": c.mu_factor if c.kernel == "coherent" else "",
            "mu_mean": float(np.mean([r.coherence for r in chunk])),
            "success_rate": float(np.mean([r.success for r in chunk])),
            "mean_error": float(np.mean([r.lifted_rel_error for r in chunk])),
            "trials": len(chunk),
        })
    return rows


def write_sweep_csv(path, rows):
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write sweep output {path}: {exc}") from exc
    with fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (row[k] for k in SWEEP_HEADER)])


# --------------------------------------------------------------------------- identifiability reports


class ParseError(ValueError):
    pass


def parse_pattern(text, L=None, source="<pattern>"):
    """Support bitset: one ``0`` or ``1`` per line; ``#`` starts a comment."""
    bits = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line not in ("0", "1"):
            raise ParseError(f"{source}:{lineno}: expected 0 or 1, got {line!r}")
        bits.append(line == "1")
    if L is not None and len(bits) != L:
        raise ParseError(f"{source}: expected {L} entries, found {len(bits)}")
    return np.array(bits, dtype=bool)


def parse_basis(text, source="<basis>"):
    """Matrix with one row per line, comma separated, complex literals allowed."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([complex(tok.strip().replace(" ", "")) for tok in line.split(",")])
        except ValueError:
            raise ParseError(f"{source}:{lineno}: malformed number in {line!r}") from None
        if len(rows[-1]) != len(rows[0]):
            raise ParseError(f"{source}:{lineno}: expected {len(rows[0])} columns, got {len(rows[-1])}")
    if not rows:
        raise ParseError(f"{source}: no data rows")
    V = np.array(rows)
    return V.real if not np.any(V.imag) else V


def identifiability_report(L, T, x_pattern=None, h_pattern=None, V=None):
    """Graph census and verdict, plus the subspace check when a basis is given.

    Returns ``(lines, data)``: printable report lines and a JSON-ready dict.
    """
    scheme = build_subsampling(L, T)
    pattern = observation_pattern(scheme)
    x_sup = np.ones(L, bool) if x_pattern is None else x_pattern
    h_sup = np.ones(L, bool) if h_pattern is None else h_pattern
    result = check_identifiable(build_graph(pattern, x_sup, h_sup))
    lines = [
        f"L = {L}, T = {T}, N = {scheme.N}",
        f"components of order > 1: {list(result.component_orders)}",
        result.summary(),
        f"forced zeros: x {list(result.forced_zero_x)} h {list(result.forced_zero_h)}",
    ]
    data = {"L": L, "T": T, "N": scheme.N, "graph": result.to_dict()}
    if V is not None:
        sub = check_subspace_condition(V, scheme)
        lines.append(sub.summary())
        data["subspace"] = sub.to_dict()
    return lines, data


# --------------------------------------------------------------------------- PGM images


class PGMError(ValueError):
    pass


def _pgm_tokens(data, count):
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMError("malformed PGM header: unexpected end of file")
        tokens.append(data[start:pos])
    if pos >= n or not data[pos:pos + 1].isspace():
        raise PGMError("malformed PGM header: missing separator before pixel data")
    return tokens, pos + 1


def read_pgm(path):
    """Load a binary (P5) graymap as a unit-norm :class:`Image`.

    The pixel norm is kept as ``raw_scale`` so :func:`write_pgm` can restore
    the original pixel values.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (P5) file")
    tokens, offset = _pgm_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise PGMError(f"{path}: malformed PGM header {tokens!r}") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise PGMError(f"{path}: invalid PGM dimensions or maxval")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    body = data[2 + offset:]
    need = width * height * dtype.itemsize
    if len(body) < need:
        raise PGMError(f"{path}: truncated payload ({len(body)} of {need} bytes)")
    pixels = np.frombuffer(body[:need], dtype=dtype).astype(np.float64)
    if pixels.max() > maxval:
        raise PGMError(f"{path}: pixel value exceeds maxval {maxval}")
    norm = np.linalg.norm(pixels)
    if norm == 0:
        return Image(pixels, (height, width), 0.0, maxval)
    return Image(pixels / norm, (height, width), float(norm), maxval)


def write_pgm(path, image, maxval=None):
    """Write an image as binary PGM.

    Images carrying ``raw_scale`` are written back in their original pixel
    units; others are stretched so the largest value maps to ``maxval``.
    Negative values are clipped to zero.
    """
    values = np.real(np.asarray(getattr(image, "values", image), dtype=complex))
    shape = getattr(image, "shape", None) or (1, values.size)
    if len(shape) == 1:
        shape = (1, shape[0])
    maxval = maxval or getattr(image, "maxval", None) or 255
    raw = getattr(image, "raw_scale", None)
    if raw is not None:
        pixels = values * raw
    else:
        top = values.max()
        pixels = values * (maxval / top) if top > 0 else np.zeros_like(values)
    pixels = np.clip(np.rint(pixels), 0, maxval)
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    height, width = shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        fh.write(pixels.astype(dtype).tobytes())


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
