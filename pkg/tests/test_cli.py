import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from pedtwin.cli import main, parse_grid
from pedtwin.latency import STAGE_DEFAULTS
from pedtwin.pipeline import default_config_dict
from pedtwin.world import (
    Agent,
    Scenario,
    Waypoint,
    dump_scenario,
    head_on_scenario,
    load_scenario,
)


@pytest.fixture
def demo(tmp_path):
    path = tmp_path / "demo.json"
    assert main(["generate", "--seed", "3", "--pedestrians", "40", "--vehicles", "10", "--duration", "120",
                 "--out", str(path)]) == 0
    return path


def _read(path):
    return path.read_bytes()


def test_generate_full_scale(tmp_path):
    out = tmp_path / "s.json"
    assert main(["generate", "--seed", "7", "--pedestrians", "232", "--vehicles", "20", "--duration", "600",
                 "--out", str(out)]) == 0
    assert len(load_scenario(out.read_text()).agents) == 252


def test_generate_empty_and_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for p in (a, b):
        assert main(["generate", "--pedestrians", "0", "--vehicles", "0", "--duration", "10", "--out", str(p)]) == 0
    assert load_scenario(a.read_text()).agents == ()
    assert _read(a) == _read(b)


def test_run_outputs(demo, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--scenario", str(demo), "--out-dir", str(out), "--profile-policy", "large"]) == 0
    lines = (out / "warnings.jsonl").read_bytes().splitlines()
    assert lines
    rows = list(csv.DictReader(io.StringIO((out / "latency.csv").read_text())))
    n = len(rows) // 6
    for stage, (mean, std) in {**STAGE_DEFAULTS, "detection": (11.140, 1.800), "msg_retrieve": (39.21, 7.12)}.items():
        x = np.array([float(r["sample_ms"]) for r in rows if r["stage"] == stage])
        assert len(x) == n
        assert abs(x.mean() - mean) < 3 * std / np.sqrt(n), stage
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "run"
    assert len(manifest["config_hash"]) == 64
    assert (out / "risk_log.csv").exists()


def test_run_is_byte_identical(demo, tmp_path):
    outs = [tmp_path / "r1", tmp_path / "r2"]
    for o in outs:
        assert main(["run", "--scenario", str(demo), "--out-dir", str(o), "--seed", "11"]) == 0
    for name in ("warnings.jsonl", "latency.csv", "risk_log.csv"):
        assert _read(outs[0] / name) == _read(outs[1] / name)
    m1, m2 = (json.loads((o / "manifest.json").read_text()) for o in outs)
    assert m1["config_hash"] == m2["config_hash"]


def test_lte_slower_than_ethernet(tmp_path):
    sc = tmp_path / "h.json"
    sc.write_text(dump_scenario(head_on_scenario()))
    e2e = {}
    for net in ("lte", "ethernet"):
        out = tmp_path / net
        assert main(["run", "--scenario", str(sc), "--out-dir", str(out), "--network", net]) == 0
        rows = list(csv.DictReader(io.StringIO((out / "latency.csv").read_text())))
        e2e[net] = np.mean([float(r["end_to_end_ms"]) for r in rows if r["stage"] == "reception"])
    assert e2e["lte"] > e2e["ethernet"]


def test_missing_config_field_exits_2(tmp_path, capsys):
    doc = default_config_dict()
    del doc["thresholds"]
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    sc = tmp_path / "h.json"
    sc.write_text(dump_scenario(head_on_scenario()))
    assert main(["run", "--scenario", str(sc), "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 2
    assert "thresholds" in capsys.readouterr().err


def test_bad_scenario_exits_2(tmp_path, capsys):
    sc = tmp_path / "bad.json"
    sc.write_text('{"seed": 1}')
    assert main(["run", "--scenario", str(sc), "--out-dir", str(tmp_path / "o")]) == 2
    assert main(["run", "--scenario", str(tmp_path / "nope.json"), "--out-dir", str(tmp_path / "o")]) == 2


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["run"])
    assert err.value.code == 2


def test_runtime_failure_exits_1(tmp_path, monkeypatch):
    import pedtwin.pipeline as pl

    def boom(*a, **kw):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(pl, "run_pipeline", boom)
    sc = tmp_path / "h.json"
    sc.write_text(dump_scenario(head_on_scenario()))
    assert main(["run", "--scenario", str(sc), "--out-dir", str(tmp_path / "o")]) == 1


def test_roc_ttc_grid(tmp_path, capsys):
    out = tmp_path / "roc.csv"
    assert main(["roc", "--encounters", "30", "--seed", "2", "--axis", "ttc", "--grid", "0.1:1.2:0.1",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 12
    tpr = [float(r["tpr"]) for r in rows]
    fpr = [float(r["fpr"]) for r in rows]
    assert tpr == sorted(tpr) and fpr == sorted(fpr)
    assert "selected ttc threshold" in capsys.readouterr().err


def test_roc_distance_grid_json(tmp_path):
    out = tmp_path / "roc.json"
    assert main(["roc", "--encounters", "30", "--seed", "2", "--axis", "distance", "--grid", "5:100:5",
                 "--format", "json", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["points"]) == 20
    tpr = [p["tpr"] for p in doc["points"]]
    assert tpr == sorted(tpr)
    assert set(doc["confusion"]) == {"tp", "fp", "fn", "tn", "tpr", "fpr"}


def test_roc_all_safe_flags_undefined_tpr(tmp_path, capsys):
    ped = Agent("ped000", "pedestrian", 0.3, (Waypoint(0, 0, 1.0), Waypoint(0, 10, 0)))
    veh = Agent("veh000", "vehicle", 1.0, (Waypoint(-30, 30, 8.0), Waypoint(30, 30, 0)))
    sc = tmp_path / "safe.json"
    sc.write_text(dump_scenario(Scenario(0, 10.0, 0.1, (ped, veh))))
    out = tmp_path / "roc.csv"
    assert main(["roc", "--scenarios", str(sc), "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert all(r["tpr"] == "" for r in rows)
    assert "TPR undefined" in capsys.readouterr().err


def test_roc_without_episodes_exits_2():
    assert main(["roc"]) == 2


def test_uwb_bench_rows(capsys):
    assert main(["uwb-bench", "--seed", "1"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["scenario"] for r in rows] == ["single", "two_users"]
    assert float(rows[0]["freq_hz"]) == pytest.approx(10.0)
    assert float(rows[1]["freq_hz"]) == pytest.approx(0.3, abs=0.01)


def test_uwb_bench_noiseless(capsys):
    assert main(["uwb-bench", "--sigma", "0", "--users", "ped000", "--format", "json"]) == 0
    (row,) = json.loads(capsys.readouterr().out)
    assert row["mean_error"] < 1e-6


def test_latency_report(demo, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--scenario", str(demo), "--out-dir", str(out)]) == 0
    capsys.readouterr()
    assert main(["latency-report", "--latency", str(out / "latency.csv")]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["stage"] for r in rows] == ["reception", "preprocessing", "detection", "tracking", "msg_create",
                                          "msg_retrieve", "end_to_end"]


def test_default_config_is_loadable(tmp_path):
    out = tmp_path / "cfg.json"
    assert main(["default-config", "--seed", "4", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["seed"] == 4


def test_parse_grid():
    assert parse_grid("0.1:1.2:0.1") == [round(0.1 * k, 10) for k in range(1, 13)]
    assert parse_grid("5,10,30") == [5.0, 10.0, 30.0]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "pedtwin", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "uwb-bench" in res.stdout
