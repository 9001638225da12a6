import csv
import json

import pytest

from dissxyz.cli import cli_main


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "cfg"
    path.write_text("lx = 2\nly = 2\njx = 0.9\njz = 1.0\ngamma = 1.0\n")
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_scan_writes_17_rows(tmp_path, cfg):
    out = tmp_path / "scan.csv"
    assert cli_main(["scan", "--config", str(cfg), "--jy", "0.9:1.3:0.025",
                     "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("Jy,chi_av,chi_xx,chi_xy,chi_yx,chi_yy,S,FQ_per_site,tau_star")
    assert len(lines) == 18
    assert json.loads((tmp_path / "scan.csv.json").read_text())["spec"]["lx"] == 2


def test_resume_reproduces_csv(tmp_path, cfg):
    full = tmp_path / "full.csv"
    part = tmp_path / "part.csv"
    assert cli_main(["scan", "--config", str(cfg), "--jy", "0.9:1.1:0.05", "--out", str(full)]) == 0
    assert cli_main(["scan", "--config", str(cfg), "--jy", "0.9:0.95:0.05", "--out", str(part)]) == 0
    assert cli_main(["scan", "--config", str(cfg), "--jy", "0.9:1.1:0.05", "--out", str(part),
                     "--resume"]) == 0
    assert full.read_text() == part.read_text()


def test_peaks_and_exponents(tmp_path, capsys):
    # synthetic scans with known parabolic peaks, heights 2 L^1.5
    paths = []
    for L in (2, 3, 4, 5):
        path = tmp_path / f"s{L}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["Jy", "chi_av", "chi_av_err", "status"])
            for k in range(9):
                jy = 0.9 + 0.05 * k
                w.writerow([jy, 2 * L ** 1.5 - 10 * (jy - (1.07 + 0.2 / L)) ** 2, 0.0, "ok"])
        (tmp_path / f"s{L}.csv.json").write_text(json.dumps({"spec": {"lx": L, "ly": L}}))
        paths.append(str(path))
    peaks = tmp_path / "peaks.csv"
    assert cli_main(["peaks", "--in", *paths, "--column", "chi_av", "--out", str(peaks)]) == 0
    rows = read_rows(peaks)
    assert [int(r["L"]) for r in rows] == [2, 3, 4, 5]
    capsys.readouterr()
    assert cli_main(["exponents", "--in", str(peaks), "--column", "chi_av", "--lmin", "2"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert set(payload) >= {"exponent", "prefactor", "stderr", "lmin"}
    assert abs(payload["exponent"] - 1.5) < 1e-9
    assert abs(payload["critical_coupling"]["jc"] - 1.07) < 1e-9


def test_observables_json(tmp_path, cfg):
    out = tmp_path / "obs.json"
    assert cli_main(["observables", "--config", str(cfg), "--jy", "1.0", "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert payload["spec"]["jy"] == 1.0
    assert payload["solver"]["kind"] == "master"
    assert payload["record"]["negativity"] > 0


def test_corner_converge(tmp_path, cfg):
    out = tmp_path / "cc.json"
    assert cli_main(["corner-converge", "--config", str(cfg), "--jy", "1.1",
                     "--corner-schedule", "15,16", "--tol", "1e-2", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["converged"]


def test_usage_errors_exit_2(tmp_path, cfg, capsys):
    assert cli_main([]) == 2
    assert cli_main(["scan", "--config", str(cfg)]) == 2          # missing --out
    assert cli_main(["scan", "--jy", "banana", "--out", str(tmp_path / "x.csv")]) == 2
    assert cli_main(["scan", "--config", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "x.csv")]) == 2
    assert cli_main(["observables", "--solver", "corner"]) == 2   # needs --corner-dim
    assert cli_main(["exponents", "--in", str(tmp_path / "nope.csv")]) == 2


def test_solver_errors_exit_1(tmp_path, cfg, capsys):
    assert cli_main(["corner-converge", "--config", str(cfg), "--jy", "1.1",
                     "--corner-schedule", "4,6", "--tol", "1e-12"]) == 1
    assert "CornerConvergenceError" in capsys.readouterr().err
    assert cli_main(["observables", "--L", "5"]) == 1              # too large for full space
