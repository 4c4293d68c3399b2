"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 solver did not converge.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__, binfmt
from .harness import (
    Instance,
    SWEEP_HEADER,
    ConfigError,
    ExperimentConfig,
    identifiability_report,
    make_instance,
    parse_basis,
    parse_pattern,
    run_trials,
    score,
    solve_instance,
    spectral_trial,
    sweep,
    write_pgm,
    write_sweep_csv,
    write_trials_csv,
)
from .measurement import export_measurements_csv, load_measurements, save_measurements
from .model import (
    Image,
    build_subsampling,
    coherence,
    export_kernel_csv,
    export_masks_csv,
    load_kernel,
    load_masks,
    make_transform,
    save_kernel,
    save_masks,
    write_csv,
)
from .recovery import extract_factors, write_trace

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONCONVERGED = 0, 1, 2, 3

log = logging.getLogger("maskdeconv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def _load_config(args):
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        changes["output_dir"] = args.out
    return cfg.replace(**changes).validate() if changes else cfg


def _outdir(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def _save_image(path_stem, image, fmt):
    if fmt == "pgm":
        write_pgm(path_stem + ".pgm", image)
    elif fmt == "csv":
        write_csv(path_stem + ".csv", [[v] for v in image.values], header=["value"])
    else:
        grid = image.shape if len(image.shape) == 2 else (image.L, 1)
        binfmt.write_record(path_stem + ".bin", binfmt.KIND_MATRIX,
                            np.asarray(image.values)[None, :], image.L, grid=grid)


def _load_image(stem):
    rec = binfmt.read_record(stem + ".bin", binfmt.KIND_MATRIX)
    shape = None if rec.grid[1] == 1 else rec.grid
    return Image(rec.data[0], shape)


# --------------------------------------------------------------------------- commands


def cmd_simulate(args):
    cfg = _load_config(args)
    out = _outdir(cfg)
    rng = np.random.default_rng([cfg.seed, 0, 0])
    inst = make_instance(cfg, rng)
    fmt = args.format
    # binary files are always written; they are what 'recover --data' reads
    _save_image(os.path.join(out, "image"), inst.image, "bin")
    save_kernel(os.path.join(out, "kernel.bin"), inst.kernel)
    save_masks(os.path.join(out, "masks.bin"), inst.masks)
    save_measurements(os.path.join(out, "measurements.bin"), inst.measurements)
    if fmt == "pgm":
        _save_image(os.path.join(out, "image"), inst.image, "pgm")
    elif fmt == "csv":
        _save_image(os.path.join(out, "image"), inst.image, "csv")
        export_kernel_csv(os.path.join(out, "kernel.csv"), inst.kernel)
        export_masks_csv(os.path.join(out, "masks.csv"), inst.masks)
        export_measurements_csv(os.path.join(out, "measurements.csv"), inst.measurements)
    write_csv(os.path.join(out, "basis.csv"), inst.kernel.transform.matrix().conj().T.tolist())
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    print(f"wrote instance (L={inst.image.L}, N={inst.scheme.N}, K={cfg.K}, "
          f"mu={coherence(inst.kernel):.4f}) to {out}")
    return EXIT_OK


def _recover_data(cfg, args):
    d = args.data
    kernel = load_kernel(os.path.join(d, "kernel.bin"))
    masks = load_masks(os.path.join(d, "masks.bin"))
    meas = load_measurements(os.path.join(d, "measurements.bin"))
    image = _load_image(os.path.join(d, "image"))
    if masks.L != kernel.L or meas.scheme.L != kernel.L or meas.K != masks.K:
        raise ValueError("kernel, masks and measurements in the data directory disagree")
    inst = Instance(image, kernel, masks, meas.scheme, meas)
    sol = solve_instance(cfg, inst, cfg.solver.seed)
    res = score(cfg, inst, sol, cfg.seed)
    out = _outdir(cfg)
    write_trials_csv(os.path.join(out, "trials.csv"), [res])
    write_trace(os.path.join(out, "trace.csv"), sol)
    if sol.sigma > 0:
        h_est, x_est = extract_factors(sol)
        _save_image(os.path.join(out, "recovered"), Image(x_est, image.shape), args.format)
        binfmt.write_record(os.path.join(out, "recovered_freq.bin"), binfmt.KIND_MATRIX,
                            h_est[:, None], kernel.L)
    return [res]


def cmd_recover(args):
    cfg = _load_config(args)
    if args.data:
        results = _recover_data(cfg, args)
    else:
        results = run_trials(cfg, threads=args.threads)
        write_trials_csv(os.path.join(_outdir(cfg), "trials.csv"), results)
    for r in results:
        print(f"seed {r.seed}: lifted error {r.lifted_rel_error:.3e} residual {r.residual:.3e} "
              f"iterations {r.iterations} {'success' if r.success else 'failure'}")
    rate = np.mean([r.success for r in results])
    print(f"success rate {rate:.3f} at threshold {cfg.success_threshold:g}")
    if not all(r.converged for r in results):
        print("warning: solver did not converge in at least one trial", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_spectral(args):
    cfg = _load_config(args)
    out = _outdir(cfg)
    trials = [spectral_trial(cfg, (cfg.seed, 0, t)) for t in range(cfg.trials)]
    rows = [[str(t.seed[-1]), t.lifted_rel_error, t.err_bound, str(int(t.within_bound))] for t in trials]
    write_csv(os.path.join(out, "spectral.csv"), rows,
              header=["trial", "lifted_rel_error", "err_bound", "within_bound"])
    for t in trials:
        print(f"trial {t.seed[-1]}: lifted error {t.lifted_rel_error:.3e} bound {t.err_bound:.3e}")
    return EXIT_OK


def _read_text(path):
    with open(path) as fh:
        return fh.read()


def cmd_identifiability(args):
    L, T = args.L, args.T
    if L is None or T is None:
        if not args.config:
            raise UsageError("identifiability needs --L and --T (or --config)")
        cfg = _load_config(args)
        L, T = L or cfg.L, T or cfg.T
    xp = parse_pattern(_read_text(args.x_pattern), L, args.x_pattern) if args.x_pattern else None
    hp = parse_pattern(_read_text(args.h_pattern), L, args.h_pattern) if args.h_pattern else None
    V = parse_basis(_read_text(args.basis), args.basis) if args.basis else None
    lines, data = identifiability_report(L, T, xp, hp, V)
    if args.json:
        print(json.dumps(data, indent=2))
    else:
        print("\n".join(lines))
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load_config(args)
    out = _outdir(cfg)
    rows = sweep(cfg, threads=args.threads)
    path = os.path.join(out, "sweep.csv")
    write_sweep_csv(path, rows)
    print(",".join(SWEEP_HEADER))
    for row in rows:
        print(",".join(f"{row[k]:.6g}" if isinstance(row[k], float) else str(row[k]) for k in SWEEP_HEADER))
    return EXIT_OK


def cmd_info(args):
    print(f"maskdeconv {__version__}")
    if not args.config:
        return EXIT_OK
    cfg = _load_config(args)
    L = cfg.L ** 2 if cfg.dims == 2 else cfg.L
    N = cfg.samples ** 2 if cfg.dims == 2 else cfg.samples
    print(f"L = {L}, T = {cfg.T}, N = {N}, K = {cfg.K}")
    print(f"coherence range [{L / N:.4g}, {L}]")
    mu = L / N * (cfg.mu_factor or 1.0)
    rate = mu * np.log(L) ** 2 * np.log(L * np.e / mu) * np.log(np.log(N + 1)) if N > 1 else float("nan")
    print(f"mu log^2 L log(Le/mu) loglog(N+1) at mu = {mu:.4g}: {rate:.4g}")
    scheme = build_subsampling((cfg.L, cfg.L) if cfg.dims == 2 else cfg.L, cfg.T)
    grid = scheme.grid if cfg.dims == 2 else cfg.L
    Ns = tuple(a.N for a in scheme.axes) if cfg.dims == 2 else scheme.N
    start = cfg.omega_start if cfg.omega_start is not None else 0
    transform = make_transform(grid, Ns, (start, start) if cfg.dims == 2 else start)
    print(f"whitening condition number {scheme.whitener(transform).cond:.4g}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value experiment file")
    common.add_argument("--seed", type=_u64, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for trials")
    common.add_argument("--format", choices=("csv", "pgm", "bin"), default="bin",
                        help="file format for written images and data")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="maskdeconv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"maskdeconv {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", parents=[common], help="draw and save one synthetic instance")
    s.set_defaults(func=cmd_simulate)
    s = sub.add_parser("recover", parents=[common], help="run seeded trials or solve saved data")
    s.add_argument("--data", help="directory written by 'simulate'")
    s.set_defaults(func=cmd_recover)
    s = sub.add_parser("spectral", parents=[common], help="spectral recovery with Phi = I")
    s.set_defaults(func=cmd_spectral)
    s = sub.add_parser("identifiability", parents=[common], help="uniqueness report")
    s.add_argument("--L", type=int)
    s.add_argument("--T", type=int)
    s.add_argument("--x-pattern", help="support file for x (one 0/1 per line)")
    s.add_argument("--h-pattern", help="support file for h (one 0/1 per line)")
    s.add_argument("--basis", help="CSV basis V (L rows, N columns)")
    s.add_argument("--json", action="store_true", help="print the report as JSON")
    s.set_defaults(func=cmd_identifiability)
    s = sub.add_parser("sweep", parents=[common], help="phase-transition sweep to CSV")
    s.set_defaults(func=cmd_sweep)
    s = sub.add_parser("info", parents=[common], help="version and derived parameters")
    s.set_defaults(func=cmd_info)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and --version
        return exc.code or EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
