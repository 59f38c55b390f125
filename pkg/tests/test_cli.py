import json
import math
import subprocess
import sys

import numpy as np
import pytest

from wfintertwine.cli import (
    EXIT_FAIL,
    EXIT_PASS,
    EXIT_USAGE,
    UsageError,
    main,
    parse_times,
    read_config_file,
    resolve_settings,
)

LN2 = math.log(2.0)
SMALL_VERIFY = ["verify", "--n-max", "3", "--t", "0.1", "--trials", "50"]


def load(path):
    return json.loads(path.read_text())


# -- settings --------------------------------------------------------------------


def test_parse_times():
    assert parse_times("0.1,0.5").tolist() == [0.1, 0.5]
    np.testing.assert_allclose(parse_times("0:1:0.25"), [0, 0.25, 0.5, 0.75, 1.0])
    assert parse_times("").size == 0
    for bad in ("a,b", "1:0:0.1", "0:1:0"):
        with pytest.raises(UsageError):
            parse_times(bad)


def test_settings_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nseed = 5\npaths = 300\nt-max = 2.5\n")
    assert read_config_file(cfg) == {"seed": "5", "paths": "300", "t_max": "2.5"}
    s, src = resolve_settings("simulate", {}, None, env={})
    assert s["seed"] == 0 and src == "default"
    s, src = resolve_settings("simulate", {}, None, env={"WFINTERTWINE_SEED": "9"})
    assert s["seed"] == 9 and src == "env:WFINTERTWINE_SEED"
    s, src = resolve_settings("simulate", {}, cfg, env={"WFINTERTWINE_SEED": "9"})
    assert s["seed"] == 5 and s["paths"] == 300 and s["t_max"] == 2.5 and src == "config"
    s, src = resolve_settings("simulate", {"seed": 7, "paths": None}, cfg, env={"WFINTERTWINE_SEED": "9"})
    assert s["seed"] == 7 and s["paths"] == 300 and src == "flag"


def test_settings_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    with pytest.raises(UsageError):
        resolve_settings("simulate", {}, bad, env={})
    bad.write_text("no equals sign\n")
    with pytest.raises(UsageError):
        resolve_settings("simulate", {}, bad, env={})
    with pytest.raises(UsageError):
        resolve_settings("simulate", {"paths": "many"}, None, env={})
    with pytest.raises(UsageError):
        resolve_settings("simulate", {"seed": -1}, None, env={})


# -- verify ----------------------------------------------------------------------


def test_verify_passes_and_writes_manifest(tmp_path, capsys):
    assert main(SMALL_VERIFY + ["--out", str(tmp_path)]) == EXIT_PASS
    report = load(tmp_path / "report.json")
    assert report["passed"] and report["mode"] == "exact"
    assert all(e["max_abs_residual"] == 0 for e in report["identities"] if e["identity"] != "PtK=KQt")
    assert report["maximum_principle"]["violations"] == 0
    mf = load(tmp_path / "manifest.json")
    assert mf["subcommand"] == "verify" and mf["master_seed"] == 0
    assert set(mf) >= {"config", "seed_source", "tool_version", "started", "finished", "outputs", "timings"}
    assert "elapsed" not in json.dumps(report)
    assert json.loads(capsys.readouterr().out)["passed"]


def test_verify_default_run_passes(tmp_path):
    assert main(["verify", "--out", str(tmp_path)]) == EXIT_PASS
    report = load(tmp_path / "report.json")
    names = {e["identity"] for e in report["identities"]}
    assert len(names) == 4
    assert all(a["order"] >= 0.8 for a in report["approximation"])


def test_verify_negative_control(tmp_path, capsys):
    code = main(SMALL_VERIFY + ["--perturb-rate", "1=13", "--out", str(tmp_path)])
    assert code == EXIT_FAIL
    err = capsys.readouterr().err
    failing = json.loads(err)
    assert failing["identity"] == "GK=KH" and failing["max_abs_residual"] > 0


def test_verify_time_zero_has_zero_residual(tmp_path):
    assert main(["verify", "--n-max", "2", "--t", "0", "--trials", "0", "--out", str(tmp_path)]) == EXIT_PASS
    pt = [e for e in load(tmp_path / "report.json")["identities"] if e["identity"] == "PtK=KQt"]
    assert pt and pt[0]["max_abs_residual"] == 0.0


def test_verify_exact_mode_ignores_tol(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(SMALL_VERIFY + ["--tol", "1e-3", "--out", str(a)]) == EXIT_PASS
    assert main(SMALL_VERIFY + ["--tol", "1e-14", "--out", str(b)]) == EXIT_PASS
    ra, rb = load(a / "report.json"), load(b / "report.json")
    assert ra["identities"] == rb["identities"]


def test_verify_float_mode(tmp_path):
    assert main(SMALL_VERIFY + ["--mode", "float", "--out", str(tmp_path)]) == EXIT_PASS
    assert load(tmp_path / "report.json")["mode"] == "float"


# -- simulate --------------------------------------------------------------------


def test_simulate_birth_mean(tmp_path):
    assert main(["simulate", "birth", "--paths", "20000", "--seed", "4", "--out", str(tmp_path)]) == EXIT_PASS
    summary = load(tmp_path / "summary.json")
    ev = summary["event_time"]
    assert abs(ev["mean"] - LN2) <= 3 * ev["se"]
    assert summary["reference_mean"] == pytest.approx(LN2)
    lines = (tmp_path / "absorption.csv").read_text().splitlines()
    assert lines[0] == "path_id,time" and len(lines) == 20001


def test_simulate_coupled_from_one(tmp_path):
    args = ["simulate", "coupled", "--x0", "1", "--paths", "50", "--t", "0,0.5", "--out", str(tmp_path)]
    assert main(args) == EXIT_PASS
    times = np.loadtxt(tmp_path / "absorption.csv", delimiter=",", skiprows=1)[:, 1]
    assert np.all(times == 0.0)
    assert (tmp_path / "trajectories.csv").exists()


def test_simulate_wf_writes_absorption(tmp_path):
    args = ["simulate", "wf", "--x0", "0.5", "--paths", "200", "--dt", "1e-3", "--out", str(tmp_path)]
    assert main(args) == EXIT_PASS
    mf = load(tmp_path / "manifest.json")
    assert set(mf["outputs"]) == {"absorption.csv", "summary.json"}
    assert mf["config"]["kind"] == "wf"


def test_replay_is_byte_identical(tmp_path):
    first = tmp_path / "first"
    args = ["simulate", "coupled", "--x0", "0.5", "--paths", "300", "--dt", "1e-3", "--t", "0:0.2:0.05"]
    assert main(args + ["--seed", "123", "--out", str(first)]) == EXIT_PASS
    second = tmp_path / "second"
    assert main(["replay", str(first / "manifest.json"), "--out", str(second)]) == EXIT_PASS
    m1, m2 = load(first / "manifest.json"), load(second / "manifest.json")
    assert m1["outputs"] == m2["outputs"] and m1["config"] == m2["config"]
    for name in m1["outputs"]:
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_replay_of_verify(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(SMALL_VERIFY + ["--out", str(a)]) == EXIT_PASS
    assert main(["replay", str(a / "manifest.json"), "--out", str(b)]) == EXIT_PASS
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_env_seed_is_recorded(tmp_path, monkeypatch):
    monkeypatch.setenv("WFINTERTWINE_SEED", "77")
    assert main(["simulate", "birth", "--paths", "10", "--out", str(tmp_path)]) == EXIT_PASS
    mf = load(tmp_path / "manifest.json")
    assert mf["master_seed"] == 77 and mf["seed_source"] == "env:WFINTERTWINE_SEED"


# -- analyze ---------------------------------------------------------------------


def test_analyze_moments_and_averaging_from_input(tmp_path):
    sim_dir = tmp_path / "sim"
    args = ["simulate", "coupled", "--x0", "0.5", "--paths", "2000", "--t", "0,0.25", "--t-max", "0.25"]
    assert main(args + ["--out", str(sim_dir)]) == EXIT_PASS
    mom = tmp_path / "mom"
    assert main(["analyze", "moments", "--input", str(sim_dir), "--out", str(mom)]) == EXIT_PASS
    rows = load(mom / "report.json")["rows"]
    assert rows[0]["t"] == 0.0 and rows[0]["mean_x2"] == pytest.approx(0.25)
    assert rows[1]["exact"] == pytest.approx(1 - 0.75 * math.exp(-0.5))
    avg = tmp_path / "avg"
    main(["analyze", "averaging", "--input", str(sim_dir), "--out", str(avg)])
    rep = load(avg / "report.json")
    assert rep["times"] == [0.0, 0.25] and rep["total_variation"][0] <= 0.02
    assert rep["p0_z"][0] == pytest.approx((rep["p0_empirical"][0] - 0.75) / rep["p0_se"][0])


def test_analyze_drift_from_input(tmp_path):
    sim_dir = tmp_path / "sim"
    args = ["simulate", "coupled", "--x0", "0.5", "--paths", "300", "--t", "0:0.1:0.001", "--t-max", "0.1"]
    assert main(args + ["--out", str(sim_dir)]) == EXIT_PASS
    out = tmp_path / "drift"
    code = main(["analyze", "drift-sign", "--input", str(sim_dir), "--out", str(out)])
    assert code in (EXIT_PASS, EXIT_FAIL)
    rep = load(out / "report.json")
    assert rep["task"] == "drift-sign" and rep["h"] == pytest.approx(1e-3)


def test_analyze_absorption_ks(tmp_path):
    sim_dir = tmp_path / "sim"
    assert main(["simulate", "wf", "--x0", "0", "--paths", "10000", "--seed", "3", "--out", str(sim_dir)]) == 0
    out = tmp_path / "ks"
    code = main(["analyze", "absorption-ks", "--input", str(sim_dir), "--out", str(out)])
    rep = load(out / "report.json")
    assert code == EXIT_PASS and rep["passed"]
    assert rep["exact_mean"] == pytest.approx(LN2)
    assert (out / "cdf.csv").read_text().startswith("t,lower,upper\n")


def test_analyze_rejects_wrong_input_kind(tmp_path):
    sim_dir = tmp_path / "sim"
    assert main(["simulate", "birth", "--paths", "10", "--out", str(sim_dir)]) == 0
    assert main(["analyze", "moments", "--input", str(sim_dir)]) == EXIT_USAGE


def test_malformed_inputs_exit_2(tmp_path, capsys):
    assert main(["analyze", "moments", "--input", str(tmp_path / "nowhere")]) == EXIT_USAGE
    sim_dir = tmp_path / "sim"
    assert main(["simulate", "coupled", "--paths", "5", "--t", "0,0.1", "--t-max", "0.1", "--out", str(sim_dir)]) == 0
    (sim_dir / "trajectories.csv").write_text("path_id,t,x,y\n0,0.0,abc,0\n")
    assert main(["analyze", "moments", "--input", str(sim_dir)]) == EXIT_USAGE
    (sim_dir / "trajectories.csv").write_text("wrong,header\n")
    assert main(["analyze", "moments", "--input", str(sim_dir)]) == EXIT_USAGE
    assert "error:" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["verify", "--mode", "sideways"]) == EXIT_USAGE
    assert main(["simulate", "--x0", "2"]) == EXIT_USAGE
    assert main(["simulate", "--dt", "0"]) == EXIT_USAGE
    assert main(["verify", "--perturb-rate", "garbage"]) == EXIT_USAGE
    assert main(["replay", str(tmp_path / "missing.json")]) == EXIT_USAGE


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "wfintertwine", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
