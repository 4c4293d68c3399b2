import csv
import dataclasses

import numpy as np
import pytest

from maskdeconv.harness import (
    SWEEP_HEADER,
    ConfigError,
    ExperimentConfig,
    ParseError,
    PGMError,
    TrialResult,
    identifiability_report,
    parse_basis,
    parse_pattern,
    period_for_samples,
    read_pgm,
    run_trial,
    run_trials,
    spectral_trial,
    sweep,
    sweep_cells,
    write_pgm,
    write_sweep_csv,
)
from maskdeconv.model import Image, make_transform
from maskdeconv.recovery import SolverConfig


def small_cfg(**kw):
    base = dict(L=48, T=3, K=30, max_mu_factor=3.0, trials=2)
    base.update(kw)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------- configuration


def test_config_parse_roundtrip():
    text = """
    # comment
    L = 64
    T = 4
    K = 20   # trailing comment
    kernel = coherent
    mu_factor = 4
    omega_start = auto
    conj_symmetric = yes
    solver.feas_tol = 1e-9
    solver.inner = gd
    sweep.K = 10, 20, 40
    """
    cfg = ExperimentConfig.from_text(text)
    assert (cfg.L, cfg.T, cfg.K, cfg.mu_factor) == (64, 4, 20, 4.0)
    assert cfg.omega_start is None and cfg.conj_symmetric
    assert cfg.solver.feas_tol == 1e-9 and cfg.solver.inner == "gd"
    assert cfg.sweep_K == (10, 20, 40)
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize("text,where", [
    ("L = 10\nbogus = 3\n", ":2:"),
    ("solver.nope = 1\n", ":1:"),
    ("L 10\n", ":1:"),
    ("K = ten\n", ":1:"),
    ("conj_symmetric = maybe\n", ":1:"),
])
def test_config_errors_carry_line_numbers(text, where):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_text(text, source="cfg")
    assert where in str(info.value)


@pytest.mark.parametrize("kw", [
    {"K": 0}, {"trials": 0}, {"T": 0}, {"N_blur": 20}, {"N_blur": 200}, {"kernel": "coherent"},
    {"kernel": "spiky"}, {"dims": 3}, {"noise_level": -1.0},
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        small_cfg(**kw)


def test_config_solver_errors_are_config_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("solver.rank = 0\n")


def test_n_blur_consistent_with_period():
    assert small_cfg(N_blur=16).samples == 16
    assert period_for_samples(128, 43) == 3
    with pytest.raises(ConfigError):
        period_for_samples(10, 11)


# ---------------------------------------------------------------- trials


def test_zero_masks_rejected():
    with pytest.raises(ConfigError):
        run_trial(dataclasses.replace(small_cfg(), K=0), 0)


def test_trial_is_deterministic():
    cfg = small_cfg()
    a, b = run_trial(cfg, (0, 0, 1)), run_trial(cfg, (0, 0, 1))
    assert a == b
    assert a.row() == b.row()
    assert a.success and a.threshold == 1e-4 and a.converged
    assert a.seed == (0, 0, 1)


def test_trial_seeds_differ():
    cfg = small_cfg()
    assert run_trial(cfg, 1).lifted_rel_error != run_trial(cfg, 2).lifted_rel_error


def test_threads_do_not_change_results():
    cfg = small_cfg(trials=3)
    assert run_trials(cfg, threads=1) == run_trials(cfg, threads=2)


def test_trial_with_noise_and_symmetric_kernel():
    cfg = small_cfg(L=45, noise_level=1e-6, conj_symmetric=True, omega_start=None)
    r = run_trial(cfg, 3)
    assert r.lifted_rel_error < 1e-3


def test_trial_2d():
    cfg = ExperimentConfig(L=12, T=2, K=40, dims=2, max_mu_factor=3.0, trials=1)
    r = run_trial(cfg, 0)
    assert r.success, r


def test_trial_from_pgm(tmp_path):
    rng = np.random.default_rng(0)
    px = rng.integers(1, 255, size=(9, 9))
    path = tmp_path / "img.pgm"
    path.write_bytes(b"P5\n9 9\n255\n" + px.astype(np.uint8).tobytes())
    cfg = ExperimentConfig(L=9, T=3, K=40, image=str(path), max_mu_factor=3.0, trials=1)
    r = run_trial(cfg, 0)
    assert r.success


def test_trial_result_equality_ignores_wall_time():
    fields = dict(seed=0, lifted_rel_error=0.1, h_error=0.1, x_error=0.1, residual=0.0,
                  iterations=3, converged=True, coherence=2.0, success=False, threshold=1e-4)
    assert TrialResult(wall_time=1.0, **fields) == TrialResult(wall_time=2.0, **fields)


def test_spectral_trial():
    cfg = ExperimentConfig(L=24, T=2, noise_level=1e-3)
    t = spectral_trial(cfg, (0, 0, 0))
    assert t.within_bound and 0 < t.lifted_rel_error <= t.err_bound
    assert spectral_trial(ExperimentConfig(L=24, T=2), 1).lifted_rel_error < 1e-9


# ---------------------------------------------------------------- sweeps


def test_sweep_cells_order():
    cfg = ExperimentConfig(L=64, T=4, sweep_K=(10, 20), sweep_mu_factor=(1.0, 4.0), sweep_N_blur=(16, 22))
    cells = sweep_cells(cfg)
    assert [(c.N_blur, c.mu_factor, c.K) for c in cells] == [
        (16, 1.0, 10), (16, 1.0, 20), (16, 4.0, 10), (16, 4.0, 20),
        (22, 1.0, 10), (22, 1.0, 20), (22, 4.0, 10), (22, 4.0, 20)]
    assert all(c.kernel == "coherent" for c in cells)
    assert cells[4].T == 3


def test_single_cell_sweep_csv(tmp_path):
    cfg = small_cfg(trials=2)
    rows = sweep(cfg)
    path = tmp_path / "s.csv"
    write_sweep_csv(path, rows)
    with open(path) as fh:
        table = list(csv.reader(fh))
    assert tuple(table[0]) == SWEEP_HEADER
    assert len(table) == 2 and len(table[1]) == len(SWEEP_HEADER)
    assert table[1][0] == "30" and table[1][1] == "16" and float(table[1][4]) == 1.0


def test_sweep_deterministic_across_threads(tmp_path):
    cfg = ExperimentConfig(L=32, T=4, trials=2, kernel="coherent", mu_factor=2.0, sweep_K=(6, 24))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_sweep_csv(a, sweep(cfg, threads=1))
    write_sweep_csv(b, sweep(cfg, threads=2))
    assert a.read_bytes() == b.read_bytes()


def test_sweep_unwritable(tmp_path):
    with pytest.raises(OSError):
        write_sweep_csv(tmp_path / "missing" / "s.csv", [])


def test_flat_kernel_coherence_is_minimal():
    cfg = ExperimentConfig(L=32, T=2, K=20, kernel="flat")
    r = run_trial(cfg, 0)
    assert r.coherence == pytest.approx(2.0)


# ---------------------------------------------------------------- identifiability report


def test_pattern_parser():
    text = "# x support\n1\n0\n\n1  # third\n1\n0\n"
    np.testing.assert_array_equal(parse_pattern(text, 5), [1, 0, 1, 1, 0])
    with pytest.raises(ParseError) as info:
        parse_pattern("1\n0\n2\n", source="p.txt")
    assert "p.txt:3" in str(info.value)
    with pytest.raises(ParseError):
        parse_pattern("1\n0\n", 3)


def test_basis_parser():
    V = parse_basis("1+2j, 0.5\n-1j, 3\n")
    np.testing.assert_array_equal(V, [[1 + 2j, 0.5], [-1j, 3]])
    assert np.isrealobj(parse_basis("1,2\n3,4\n"))
    with pytest.raises(ParseError) as info:
        parse_basis("1,2\n3,x\n", source="b.csv")
    assert "b.csv:2" in str(info.value)
    with pytest.raises(ParseError):
        parse_basis("1,2\n3\n")
    with pytest.raises(ParseError):
        parse_basis("# nothing\n")


def test_report_lines():
    lines, data = identifiability_report(5, 2)
    assert "identifiable: 1 component of order 10" in lines
    lines, data = identifiability_report(10, 4)
    assert "not identifiable: 2 components of order > 1" in lines
    assert data["graph"]["component_orders"] == [10, 10]


def test_report_with_basis():
    V = make_transform(20, 7, 3).matrix().conj().T
    lines, data = identifiability_report(20, 3, V=V)
    assert lines[-1] == "subspace condition: PASS" and data["subspace"]["passed"]


# ---------------------------------------------------------------- PGM


def _pgm(width, height, maxval, pixels, comment=b""):
    dt = np.uint8 if maxval < 256 else ">u2"
    return (b"P5\n" + comment + f"{width} {height}\n{maxval}\n".encode()
            + np.asarray(pixels).astype(dt).tobytes())


def test_pgm_two_by_two(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(_pgm(2, 2, 255, [0, 255, 255, 0]))
    img = read_pgm(p)
    np.testing.assert_allclose(img.values, [0, 1 / np.sqrt(2), 1 / np.sqrt(2), 0])
    assert img.shape == (2, 2) and img.maxval == 255


@pytest.mark.parametrize("maxval", [255, 65535])
def test_pgm_roundtrip_pixel_identical(tmp_path, maxval):
    rng = np.random.default_rng(maxval)
    px = rng.integers(0, maxval + 1, size=(7, 5))
    src = tmp_path / "in.pgm"
    src.write_bytes(_pgm(5, 7, maxval, px, comment=b"# made by a test\n"))
    out = tmp_path / "out.pgm"
    write_pgm(out, read_pgm(src))
    back = read_pgm(out)
    assert back.shape == (7, 5) and back.maxval == maxval
    np.testing.assert_array_equal(np.rint(back.values * back.raw_scale), px.ravel())
    payload = px.astype(np.uint8 if maxval == 255 else ">u2").tobytes()
    assert out.read_bytes().endswith(payload) and src.read_bytes().endswith(payload)


def test_pgm_large_image(tmp_path):
    p = tmp_path / "big.pgm"
    p.write_bytes(_pgm(128, 128, 255, np.arange(128 * 128) % 256))
    assert read_pgm(p).L == 16384


def test_pgm_save_stretches_unscaled(tmp_path):
    p = tmp_path / "s.pgm"
    write_pgm(p, Image(np.array([0.0, 0.5, 1.0, -0.2]), (2, 2)))
    assert p.read_bytes().endswith(bytes([0, 128, 255, 0]))


@pytest.mark.parametrize("data", [
    b"P2\n2 2\n255\n" + bytes(4),
    b"P5\n2 2\n",
    b"P5\n2 x\n255\n" + bytes(4),
    b"P5\n2 2\n255\n" + bytes(3),
    b"P5\n2 2\n0\n" + bytes(4),
    b"P5\n2 2\n100\n" + bytes([0, 0, 0, 200]),
])
def test_pgm_malformed(tmp_path, data):
    p = tmp_path / "bad.pgm"
    p.write_bytes(data)
    with pytest.raises(PGMError):
        read_pgm(p)


def test_solver_config_in_experiment():
    cfg = small_cfg(solver=SolverConfig(feas_tol=1e-9))
    assert "solver.feas_tol = 1e-09" in cfg.to_text()
