import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from pdlab import cli
from pdlab import system as sy

BASELINE = Path(__file__).parent / "data" / "baseline.json"


def run(tmp_path, *argv):
    return cli.main(list(argv) + ["--out", str(tmp_path)])


@pytest.fixture(scope="module")
def chain_all(tmp_path_factory):
    out = tmp_path_factory.mktemp("chain_all")
    code = cli.main(["all", "--system", "chain3", "--out", str(out), "--baseline", str(BASELINE)])
    return code, out


def test_check_damped_wave(tmp_path):
    assert run(tmp_path, "check", "--system", "damped_wave") == 0
    report = (tmp_path / "report.txt").read_text()
    assert "kappa=1)" in report and "kalman_sigma_min=1)" in report
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["passed"] and summary["first_failure"] is None


def test_check_uncoupled_names_B3(tmp_path):
    assert run(tmp_path, "check", "--system", "uncoupled_bad") == 2
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["first_failure"] == "check.B3"
    assert "first failure: check.B3" in (tmp_path / "report.txt").read_text()


def test_unknown_system_is_config_error(tmp_path, capsys):
    assert run(tmp_path, "check", "--system", "no_such") == 3
    assert "unknown builtin" in capsys.readouterr().err


def test_bad_run_config(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"system": "chain3", "bogus": 1}))
    assert cli.main(["check", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "bogus" in capsys.readouterr().err


def test_unreadable_system_file(tmp_path):
    assert run(tmp_path, "check", "--system", str(tmp_path / "missing.json")) == 3


def test_system_file_round_trip(tmp_path):
    path = tmp_path / "tele.json"
    path.write_text(sy.dump_system(sy.builtin("telegraph")))
    assert run(tmp_path / "o", "check", "--system", str(path)) == 0
    cfg = json.loads((tmp_path / "o" / "config.json").read_text())
    assert cfg["system"] is None and cfg["system_config"]["name"] == "telegraph"


def test_determinism_and_replay(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert run(a, "diagonalize", "--system", "damped_wave", "--orders", "1,2") == 0
    assert run(b, "diagonalize", "--system", "damped_wave", "--orders", "1,2") == 0
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    assert cli.main(["diagonalize", "--config", str(a / "config.json"), "--out", str(c)]) == 0
    assert (a / "summary.json").read_bytes() == (c / "summary.json").read_bytes()


def test_diagonalize_outputs(tmp_path):
    assert run(tmp_path, "diagonalize", "--system", "damped_wave", "--orders", "2") == 0
    s = json.loads((tmp_path / "summary.json").read_text())["stages"]["diagonalize"]
    par = s["details"]["parabolic"]
    assert par["alpha"][-1][0][0][0] == pytest.approx(1.0, abs=1e-4)
    assert s["checks"]["sylvester_k2"]["ok"] and s["checks"]["alpha_positive"]["ok"]
    assert s["details"]["cond_M"]["cond"][0] == pytest.approx(1.0)


def test_all_on_chain(chain_all):
    code, out = chain_all
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == [
        "config.json", "diffusion.csv", "evolve.csv", "report.txt", "summary.json"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["baseline"]["ok"] and not summary["baseline"]["flagged"]
    data = cli.read_plotdata(out / "diffusion.csv")
    assert list(data) == ["t", "value", "model", "model_log"]
    assert data["t"][0] == 100.0 and data["t"][-1] == 1e4


def test_evolve_csv_columns(chain_all):
    _, out = chain_all
    header = (out / "evolve.csv").read_text().splitlines()[0].split(",")
    assert header == ["t", "xi0", "norm", "col0", "col1", "col2"]


def test_missing_baseline_message(tmp_path, capsys):
    code = run(tmp_path, "check", "--system", "chain3", "--baseline", str(tmp_path / "none.json"))
    assert code == 3
    err = capsys.readouterr().err
    assert "no baseline" in err and "--record-baseline" in err


def test_record_then_compare(tmp_path):
    path = tmp_path / "base.json"
    assert run(tmp_path / "a", "check", "--system", "telegraph", "--record-baseline", str(path)) == 0
    stored = json.loads(path.read_text())["telegraph"]
    assert set(stored) == {"check.kappa", "check.kalman_sigma_min"}
    assert run(tmp_path / "b", "check", "--system", "telegraph", "--baseline", str(path)) == 0
    stored["check.kappa"] *= 2
    path.write_text(json.dumps({"telegraph": stored}))
    assert run(tmp_path / "c", "check", "--system", "telegraph", "--baseline", str(path)) == 2


# plot data and baselines

def test_plotdata_round_trip(tmp_path):
    t = [100.0, 200.0, 400.0]
    v = [0.1, 1 / 3, 2.5e-7]
    m = [0.11, 0.3, 3e-7]
    cli.emit_plotdata(tmp_path / "g.csv", t, v, m)
    got = cli.read_plotdata(tmp_path / "g.csv")
    assert got == {"t": t, "value": v, "model": m}


def test_plotdata_empty_is_header_only(tmp_path):
    cli.emit_plotdata(tmp_path / "e.csv", [], [])
    assert (tmp_path / "e.csv").read_text().strip() == "t,value,model"


def test_plotdata_length_mismatch(tmp_path):
    with pytest.raises(ValueError):
        cli.emit_plotdata(tmp_path / "x.csv", [1.0, 2.0], [1.0])


def test_compare_identical_is_empty():
    m = {"diffusion.gap_exponent": -2.4, "lyapunov.gamma": 0.5}
    rep = cli.compare_baseline(m, m)
    assert rep["ok"] and rep["flagged"] == [] and rep["new"] == [] and rep["missing"] == []


def test_compare_flags_exponent_drift():
    rep = cli.compare_baseline({"gap_exponent": -2.3}, {"gap_exponent": -2.4})
    assert [f["key"] for f in rep["flagged"]] == ["gap_exponent"]
    assert cli.compare_baseline({"gap_exponent": -2.37}, {"gap_exponent": -2.4})["ok"]


def test_compare_relative_constants():
    assert cli.compare_baseline({"gamma": 0.59}, {"gamma": 0.5})["ok"]
    assert not cli.compare_baseline({"gamma": 0.61}, {"gamma": 0.5})["ok"]


def test_compare_new_and_missing():
    rep = cli.compare_baseline({"a": 1.0, "b": 2.0}, {"a": 1.0, "c": 3.0})
    assert rep["new"] == ["b"] and rep["missing"] == ["c"] and rep["ok"]


def test_jsonable_special_values():
    out = cli.jsonable({"z": 1 + 2j, "inf": float("inf"), "nan": float("nan")})
    assert out == {"z": [1.0, 2.0], "inf": "inf", "nan": "nan"}


def test_thread_override_validated(tmp_path):
    env = {**os.environ, "PDLAB_THREADS": "many"}
    res = subprocess.run([sys.executable, "-m", "pdlab.cli", "check", "--system", "chain3", "--out", str(tmp_path)],
                         env=env, capture_output=True, text=True)
    assert res.returncode == 3 and "PDLAB_THREADS" in res.stderr
    env["PDLAB_THREADS"] = "1"
    res = subprocess.run([sys.executable, "-m", "pdlab.cli", "check", "--system", "chain3", "--out", str(tmp_path)],
                         env=env, capture_output=True, text=True)
    assert res.returncode == 0
