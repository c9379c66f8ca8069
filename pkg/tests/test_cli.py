"""Command-line interface: exit codes and artifact flow."""

import json

import numpy as np
import pytest

from fpcost import io as fio
from fpcost import make_grid, wrapped_gaussian_measure
from fpcost.cli import main


@pytest.fixture()
def measure_files(tmp_path):
    g = make_grid(1, 32, h_max=0.25)
    mu1 = wrapped_gaussian_measure(g, 0.3, 0.01)
    mu2 = wrapped_gaussian_measure(g, 0.4, 0.015)
    f1, f2 = tmp_path / "mu1.json", tmp_path / "mu2.json"
    fio.save_measure(mu1, f1)
    fio.save_measure(mu2, f2)
    return f1, f2


def test_run_scenario_exit_zero(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scenario": "tail-lemma", "n": 16,
                               "output_dir": str(tmp_path)}))
    assert main(["run", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "PASS tail-lemma:" in out
    assert "FAIL" not in out


def test_run_rejects_malformed_json(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    assert main(["run", str(cfg)]) == 2
    assert "line" in capsys.readouterr().err


def test_run_rejects_missing_field(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scenario": "tail-lemma"}))
    assert main(["run", str(cfg)]) == 2
    assert "'n'" in capsys.readouterr().err


def test_run_rejects_missing_file(tmp_path):
    assert main(["run", str(tmp_path / "absent.json")]) == 2


def test_step_command_outputs_document(measure_files, tmp_path, capsys):
    f1, f2 = measure_files
    kfile = tmp_path / "kernel.bin"
    code = main(["step", "--mu1", str(f1), "--mu2", str(f2),
                 "--h", "0.0625", "--dump-kernel", str(kfile)])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["converged"] is True
    assert doc["cost"] > 0
    cells = fio.load_kernel(kfile, 32)
    assert cells.shape[0] == 32


def test_path_command_ladder(tmp_path, capsys):
    from fpcost import fp_solve, sine_drift
    g = make_grid(1, 32, h_max=0.25)
    mu0 = wrapped_gaussian_measure(g, 0.5, 0.02)
    path = fp_solve(mu0, sine_drift(g, amplitude=0.3), (0.0, 0.25),
                    dt=1 / 256)
    pfile = tmp_path / "path.json"
    fio.save_path(path, pfile)
    csv = tmp_path / "ladder.csv"
    code = main(["path", "--path", str(pfile),
                 "--ladder", "0.0625,0.03125", "--csv", str(csv)])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["energies"]) == 2
    assert csv.exists()


def test_path_command_rejects_bad_ladder(tmp_path):
    assert main(["path", "--path", "x.json", "--ladder", "a,b"]) == 2


def test_fp_command_writes_path(measure_files, tmp_path, capsys):
    f1, _ = measure_files
    out = tmp_path / "orbit.json"
    code = main(["fp", "--drift", '{"kind": "sine", "amplitude": 0.3}',
                 "--mu0", str(f1), "--t", "0.125", "--dt", "0.00390625",
                 "--out", str(out)])
    assert code == 0
    back = fio.load_path(out)
    assert back.t0 == 0.0
    assert np.allclose(back.frames.sum(axis=1), 1.0, atol=1e-10)


def test_verify_appendix_small_run(capsys):
    code = main(["verify-appendix", "--kinds", "trace,diag",
                 "--count", "2", "--seed", "1"])
    assert code == 0
    assert "worst relative deviation" in capsys.readouterr().out


def test_verify_appendix_rejects_unknown_kind(capsys):
    assert main(["verify-appendix", "--kinds", "bogus"]) == 2


def test_report_command_round_trip(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scenario": "tail-lemma", "n": 16,
                               "output_dir": str(tmp_path)}))
    assert main(["run", str(cfg)]) == 0
    capsys.readouterr()
    before = (tmp_path / "report.csv").read_bytes()
    assert main(["report", str(tmp_path), "--format", "csv"]) == 0
    assert (tmp_path / "report.csv").read_bytes() == before


def test_report_command_missing_dir(tmp_path):
    assert main(["report", str(tmp_path), "--format", "csv"]) == 2


def test_usage_error_exit_code():
    assert main(["no-such-command"]) == 2
