import csv
import json
import shutil

import numpy as np
import pytest

from maskdeconv import __version__, binfmt
from maskdeconv.cli import main
from maskdeconv.harness import SWEEP_HEADER, TRIAL_HEADER
from maskdeconv.model import build_subsampling, make_transform

SMALL = "L = 48\nT = 3\nK = 30\nmax_mu_factor = 3\ntrials = 2\n"


@pytest.fixture
def config(tmp_path):
    def write(text=SMALL, name="cfg.txt"):
        p = tmp_path / name
        p.write_text(text)
        return str(p)
    return write


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- exit codes


@pytest.mark.parametrize("argv", [[], ["bogus"], ["recover", "--threads", "x"], ["recover", "--seed", "-1"],
                                  ["identifiability"], ["simulate", "--format", "tiff"]])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_bad_config_key_exit_1(config, capsys):
    assert main(["info", "--config", config("L = 10\nwidth = 3\n")]) == 1
    assert ":2:" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path):
    assert main(["info", "--config", str(tmp_path / "nope.txt")]) == 2


def test_nonconvergence_exit_3(config, tmp_path):
    cfg = config(SMALL + "solver.max_outer = 1\n")
    assert main(["recover", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert (tmp_path / "o" / "trials.csv").exists()


def test_version(capsys):
    assert main(["info"]) == 0
    assert capsys.readouterr().out.strip() == f"maskdeconv {__version__}"
    with pytest.raises(SystemExit):
        raise SystemExit(main(["--version"]))


# ---------------------------------------------------------------- simulate / recover


def test_recover_trials(config, tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["recover", "--config", config(), "--out", str(out), "--seed", "4"]) == 0
    rows = read_csv(out / "trials.csv")
    assert tuple(rows[0]) == TRIAL_HEADER and len(rows) == 3
    assert "success rate 1.000" in capsys.readouterr().out


@pytest.mark.parametrize("fmt", ["bin", "csv", "pgm"])
def test_simulate_then_recover(config, tmp_path, fmt):
    data, out = tmp_path / "data", tmp_path / "rec"
    assert main(["simulate", "--config", config(), "--out", str(data), "--format", fmt]) == 0
    for name in ("image.bin", "kernel.bin", "masks.bin", "measurements.bin", "basis.csv", "config.txt"):
        assert (data / name).exists()
    if fmt == "csv":
        assert (data / "measurements.csv").exists() and (data / "kernel.csv").exists()
    if fmt == "pgm":
        assert (data / "image.pgm").read_bytes().startswith(b"P5")
    assert main(["recover", "--config", str(data / "config.txt"), "--data", str(data),
                 "--out", str(out), "--format", fmt]) == 0
    rows = read_csv(out / "trials.csv")
    assert float(rows[1][TRIAL_HEADER.index("lifted_rel_error")]) < 1e-4
    assert read_csv(out / "trace.csv")[0][0] == "iteration"
    ext = {"bin": "bin", "csv": "csv", "pgm": "pgm"}[fmt]
    assert (out / f"recovered.{ext}").exists()
    rec = binfmt.read_record(out / "recovered_freq.bin", binfmt.KIND_MATRIX)
    assert rec.data.shape == (16, 1)


def test_recover_missing_data_dir_exit_2(config, tmp_path):
    assert main(["recover", "--config", config(), "--data", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 2


def test_spectral(config, tmp_path):
    cfg = config("L = 24\nT = 2\nnoise_level = 1e-3\ntrials = 3\n")
    assert main(["spectral", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "spectral.csv")
    assert rows[0] == ["trial", "lifted_rel_error", "err_bound", "within_bound"]
    assert [r[3] for r in rows[1:]] == ["1", "1", "1"]


# ---------------------------------------------------------------- identifiability


def test_identifiability_coprime(capsys):
    assert main(["identifiability", "--L", "5", "--T", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out == ["L = 5, T = 2, N = 3", "components of order > 1: [10]",
                   "identifiable: 1 component of order 10", "forced zeros: x [] h []"]


def test_identifiability_split_json(capsys):
    assert main(["identifiability", "--L", "10", "--T", "4", "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["graph"]["identifiable"] is False
    assert data["graph"]["component_orders"] == [10, 10]


def test_identifiability_from_simulated_basis(config, tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["simulate", "--config", config(), "--out", str(data)]) == 0
    assert main(["identifiability", "--L", "48", "--T", "3", "--basis", str(data / "basis.csv")]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "subspace condition: PASS"


def test_identifiability_basis_written_by_hand(tmp_path, capsys):
    V = make_transform(12, build_subsampling(12, 3).N, 5).matrix().conj().T
    p = tmp_path / "V.csv"
    p.write_text("\n".join(",".join(repr(complex(z)) for z in row) for row in V) + "\n")
    assert main(["identifiability", "--L", "12", "--T", "3", "--basis", str(p)]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "subspace condition: PASS"


def test_identifiability_patterns(tmp_path, capsys):
    x = tmp_path / "x.txt"
    x.write_text("1\n# skip\n0\n1\n1\n1\n")
    assert main(["identifiability", "--L", "5", "--T", "1", "--x-pattern", str(x)]) == 0
    assert "forced zeros: x [1] h []" in capsys.readouterr().out


def test_identifiability_malformed_pattern(tmp_path, capsys):
    x = tmp_path / "x.txt"
    x.write_text("1\n0\nyes\n1\n1\n")
    assert main(["identifiability", "--L", "5", "--T", "2", "--x-pattern", str(x)]) == 2
    assert f"{x}:3" in capsys.readouterr().err


# ---------------------------------------------------------------- sweep / info


def test_sweep(config, tmp_path, capsys):
    cfg = config("L = 32\nT = 4\ntrials = 2\nkernel = coherent\nmu_factor = 2\nsweep.K = 6, 24\n")
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert tuple(rows[0]) == SWEEP_HEADER and len(rows) == 3
    assert all(len(r) == len(SWEEP_HEADER) for r in rows)
    assert [r[0] for r in rows[1:]] == ["6", "24"]
    assert capsys.readouterr().out.splitlines()[0] == ",".join(SWEEP_HEADER)


def test_info(config, capsys):
    assert main(["info", "--config", config("L = 128\nT = 3\n")]) == 0
    out = capsys.readouterr().out
    assert "L = 128, T = 3, N = 43, K = 50" in out
    assert "whitening condition number" in out


# ---------------------------------------------------------------- determinism


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.parametrize("command", ["simulate", "recover", "spectral", "sweep"])
def test_byte_identical_across_runs_and_threads(config, tmp_path, command):
    text = SMALL + "sweep.K = 12, 30\n" if command == "sweep" else SMALL
    cfg = config(text)
    out = tmp_path / "out"
    trees = []
    for threads in ("1", "1", "2"):
        assert main([command, "--config", cfg, "--seed", "7", "--out", str(out), "--threads", threads]) == 0
        trees.append(_tree(out))
        shutil.rmtree(out)
    assert trees[0] and trees[0] == trees[1] == trees[2]


def test_seed_changes_output(config, tmp_path):
    cfg = config()
    main(["simulate", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "a")])
    main(["simulate", "--config", cfg, "--seed", "2", "--out", str(tmp_path / "b")])
    a = binfmt.read_record(tmp_path / "a" / "masks.bin").data
    b = binfmt.read_record(tmp_path / "b" / "masks.bin").data
    assert not np.array_equal(a, b)
