import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from singular_finsler.cli import run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _report(out):
    return json.loads((out / "report.json").read_text())


def test_check_norm_euclidean(tmp_path):
    out = tmp_path / "o"
    assert run(["check-norm", "--config", str(CONFIGS / "check_norm_euclidean.json"), "--out", str(out)]) == 0
    a = _report(out)["assumptions"]
    assert a["alpha_emp"] == pytest.approx(1.0, abs=1e-14) and a["beta_emp"] == pytest.approx(1.0, abs=1e-14)


def test_check_norm_ellipse_inequalities(tmp_path):
    out = tmp_path / "o"
    cfg = {"norm": {"kind": "ellipse", "A": [[4, 0], [0, 1]]}, "n_samples": 2000, "p_values": [1.5, 3], "n_pairs": 5000}
    assert run(["check-norm", "--config", _write(tmp_path, cfg), "--out", str(out)]) == 0
    rep = _report(out)
    assert [r["p"] for r in rep["inequalities"]] == [1.5, 3]
    assert all(r["min_mono_gap"] > 0 and r["min_conv_gap"] > 0 for r in rep["inequalities"])


def test_solve_manufactured_config(tmp_path):
    out = tmp_path / "o"
    assert run(["solve", "--config", str(CONFIGS / "manufactured_sine.json"), "--out", str(out)]) == 0
    rep = _report(out)
    assert len(rep["error_ratios"]) == 3
    assert all(r == pytest.approx(4.0, abs=0.2) for r in rep["error_ratios"])
    rows = list(csv.reader((out / "convergence.csv").read_text().splitlines()))
    assert rows[0] == ["resolution", "linf_error"] and len(rows) == 5


def test_malformed_json_exits_2_without_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    out = tmp_path / "o"
    assert run(["solve", "--config", str(bad), "--out", str(out)]) == 2
    assert not out.exists()


@pytest.mark.parametrize(
    "cmd,cfg",
    [
        ("solve", {"problem": {"p": 0.5, "gamma": 1}}),
        ("solve", {"problem": {"p": 2, "gamma": 1}, "epsilon": -1}),
        ("eigen", {"p": 2, "resolution": "many"}),
        ("solve", {"command": "eigen", "problem": {"p": 2, "gamma": 1}}),
        ("continuation", {"problem": {"p": 2, "gamma": 1}, "schedule": [1e-3, 1e-2]}),
        ("solve", {"manufactured": "sine", "problem": {"p": 3, "gamma": 1}}),
    ],
)
def test_invalid_configs_exit_2(tmp_path, cmd, cfg):
    out = tmp_path / "o"
    assert run([cmd, "--config", _write(tmp_path, cfg), "--out", str(out)]) == 2
    assert not out.exists()


def test_missing_config_exits_4(tmp_path):
    assert run(["solve", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 4


def test_solver_failure_exits_3_with_failure_report(tmp_path):
    out = tmp_path / "o"
    code = run(["eigen", "--config", str(CONFIGS / "eigen_interval_p2.json"), "--out", str(out), "--tol", "1e-18"])
    assert code == 3
    fail = json.loads((out / "failure.json").read_text())
    assert fail["command"] == "eigen" and "converge" in fail["error"]
    assert (out / "manifest.json").exists()


def test_manifest_hashes_reproduce(tmp_path):
    cfg = str(CONFIGS / "continuation_gamma05.json")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["continuation", "--config", cfg, "--out", str(a)]) == 0
    assert run(["continuation", "--config", cfg, "--out", str(b)]) == 0
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma == mb
    assert {e["file"] for e in ma["files"]} >= {"report.json", "seminorms.csv"}
    for entry in ma["files"]:
        data = (a / entry["file"]).read_bytes()
        assert hashlib.sha256(data).hexdigest() == entry["sha256"] and len(data) == entry["bytes"]
        assert b"\r" not in data


def test_compare_uniqueness_config(tmp_path):
    out = tmp_path / "o"
    assert run(["compare", "--config", str(CONFIGS / "compare_uniqueness.json"), "--out", str(out)]) == 0
    rep = _report(out)
    assert rep["comparison"]["passed"] and rep["uniqueness"]["max_relative_spread"] <= 1e-8


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "singular_finsler.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "sweep-gamma" in r.stdout
