import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from conftest import blob_records

from flowserve import workload
from flowserve.cli import main
from flowserve.core import ClusterSpec, ModelSpec, TraceRecord

GB = 1_000_000_000


def _write(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


def test_fit_single_type_is_mean(tmp_path, capsys):
    recs = [TraceRecord(i, a, b) for i, (a, b) in enumerate([(10, 20), (30, 60), (50, 100)])]
    workload.write_trace(recs, tmp_path / "t.jsonl")
    assert main(["--trace", str(tmp_path / "t.jsonl"), "--out-dir", str(tmp_path), "fit", "--k", "1"]) == 0
    tm = workload.TypeModel.load(tmp_path / "types.json")
    assert np.allclose(tm.centroids[0], (30, 60))


def test_fit_two_blobs(tmp_path):
    recs, truth = blob_records()
    workload.write_trace(recs, tmp_path / "t.jsonl")
    assert main(["--trace", str(tmp_path / "t.jsonl"), "--out-dir", str(tmp_path), "fit", "--k", "2"]) == 0
    tm = workload.TypeModel.load(tmp_path / "types.json")
    assert workload.assign_types(tm, recs).tolist() == truth


def test_malformed_trace_names_line(tmp_path, capsys):
    (tmp_path / "t.jsonl").write_text('{"arrival_ms": 0, "input_len": 1, "output_len": 2}\nnot json\n')
    code = main(["--trace", str(tmp_path / "t.jsonl"), "--out-dir", str(tmp_path), "fit", "--k", "1"])
    assert code == 2
    assert "t.jsonl:2:" in capsys.readouterr().err


def test_missing_file_exit_code(tmp_path):
    assert main(["--trace", str(tmp_path / "nope.jsonl"), "--out-dir", str(tmp_path), "fit"]) == 5


def _types(tmp_path):
    tm = workload.TypeModel(2, ((128.0, 1024.0), (1024.0, 16.0)), (0.0, 0.0), (1024.0, 1024.0))
    tm.save(tmp_path / "types.json")
    return str(tmp_path / "types.json")


def test_schedule_unique_configuration(tmp_path):
    cluster = _write(tmp_path / "c.json", ClusterSpec.uniform(1, 2, 80 * GB).to_dict())
    model = _write(tmp_path / "m.json", ModelSpec("m", 140 * GB, 80, 1, 1, 150 * GB).to_dict())
    args = ["--cluster", cluster, "--model", model, "--types", _types(tmp_path), "--out-dir", str(tmp_path),
            "schedule", "--counts", "100,100"]
    assert main(args) == 0
    dep = json.loads((tmp_path / "deployment.json").read_text())
    assert dep["replicas"] == [{"devices": [0, 1], "pp": 1, "tp": 2}]
    rows = list(csv.reader(open(tmp_path / "assignment.csv")))
    assert rows[0] == ["schema_version", "replica", "type", "requests"] and len(rows) == 3


def test_schedule_exhaustive_dominates(tmp_path):
    types = _types(tmp_path)
    values = {}
    for mode in ([], ["--exhaustive"]):
        out = tmp_path / ("ex" if mode else "heur")
        assert main(["--types", types, "--out-dir", str(out), "schedule", "--counts", "2400,700"] + mode) == 0
        values[bool(mode)] = json.loads((out / "schedule_summary.json").read_text())["objective"]
    assert values[True] >= values[False] >= 0.94 * values[True]


def test_model_too_large_exit_code(tmp_path):
    model = _write(tmp_path / "m.json", ModelSpec("m", 900 * GB, 80, 1, 1, 900 * GB).to_dict())
    assert main(["--model", model, "--types", _types(tmp_path), "--out-dir", str(tmp_path),
                 "schedule", "--counts", "1,1"]) == 3


def test_exhaustive_guard_exit_code(tmp_path):
    cluster = _write(tmp_path / "c.json", ClusterSpec.uniform(3, 6, 80 * GB).to_dict())
    assert main(["--cluster", cluster, "--types", _types(tmp_path), "--out-dir", str(tmp_path),
                 "schedule", "--counts", "1,1", "--exhaustive"]) == 4


def test_switch_plan_outputs(tmp_path):
    a = _write(tmp_path / "a.json", [{"devices": [0, 1], "tp": 2, "pp": 1}, {"devices": [2, 3], "tp": 2, "pp": 1}])
    b = _write(tmp_path / "b.json", [{"devices": [0, 1, 2, 3], "tp": 4, "pp": 1}])
    assert main(["--out-dir", str(tmp_path), "switch-plan", "--src", a, "--dst", b]) == 0
    summary = json.loads((tmp_path / "switch_summary.json").read_text())
    assert summary["transfers"] > 0 and summary["est_seconds"] > 0


def test_invalid_deployment_names_replica(tmp_path, capsys):
    a = _write(tmp_path / "a.json", [{"devices": [3, 4], "tp": 2, "pp": 1}])
    assert main(["--out-dir", str(tmp_path), "switch-plan", "--src", a, "--dst", a]) == 2
    assert "replica 0" in capsys.readouterr().err


def test_orchestrate_emits_three_rows(tmp_path):
    out = str(tmp_path)
    assert main(["--out-dir", out, "synth", "--spans", "4", "--rate", "600"]) == 0
    trace = str(tmp_path / "trace.jsonl")
    assert main(["--trace", trace, "--out-dir", out, "fit", "--k", "2"]) == 0
    assert main(["--trace", trace, "--types", str(tmp_path / "types.json"), "--out-dir", out, "orchestrate"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert [r["configuration"] for r in rows] == ["adaptive", "reload", "static"]
    assert main(["--trace", trace, "--types", str(tmp_path / "types.json"), "--out-dir", str(tmp_path / "sim"),
                 "simulate", "--timeline", str(tmp_path / "timeline.json")]) == 0
    again = list(csv.DictReader(open(tmp_path / "sim" / "metrics.csv")))[0]
    assert again["p99"] == rows[0]["p99"]


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "flowserve", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "orchestrate" in res.stdout
