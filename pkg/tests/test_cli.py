"""CLI subcommands end to end (in-process main())."""

from __future__ import annotations

import json

import pytest

from ehrllm.cli import main

from conftest import data_path
from stub_server import digest_pick, fixed_script
from test_serialize import SAMPLE_DESCRIPTION


def run_cli(args):
    return main([str(a) for a in args])


def test_ingest_writes_canonical_records_and_rejects(tmp_path):
    source = tmp_path / "mixed.jsonl"
    good = data_path("smoking.jsonl").read_text().splitlines()[0]
    source.write_text(good + "\n{broken\n")
    out = tmp_path / "canonical.jsonl"
    rejects = tmp_path / "rejects.jsonl"
    assert run_cli(["ingest", "--records", source, "--out", out, "--rejects", rejects]) == 0
    assert len(out.read_text().splitlines()) == 1
    reject_rows = [json.loads(l) for l in rejects.read_text().splitlines()]
    assert reject_rows[0]["line_no"] == 2


def test_aggregate_emits_bucket_means(tmp_path):
    out = tmp_path / "agg.jsonl"
    assert run_cli(["aggregate", "--records", data_path("reference_record.jsonl"),
                    "--out", out]) == 0
    row = json.loads(out.read_text().splitlines()[0])
    assert row["id"] == "demo-admission-1"
    by_feature = {s["feature"]: s for s in row["series"]}
    assert by_feature["heart_rate"]["means"] == [76.09, 78.75, 76.88, 69.75, 69.0, 69.0]
    assert by_feature["weight"]["static_value"] == 90.0


def test_render_prints_golden_block(capsys):
    assert run_cli(["render", "--records", data_path("reference_record.jsonl"),
                    "--id", "demo-admission-1"]) == 0
    out = capsys.readouterr().out
    assert out == data_path("reference_block.golden.txt").read_text() + "\n"


def test_render_with_exclusion(capsys):
    assert run_cli(["render", "--records", data_path("reference_record.jsonl"),
                    "--exclude", "glasgow_coma_scale_total"]) == 0
    out = capsys.readouterr().out
    assert "Glasgow coma scale total" not in out
    assert "heart rate: 76.09" in out


def test_describe_command(stub, capsys):
    server = stub(fixed_script(SAMPLE_DESCRIPTION))
    assert run_cli(["describe", "--records", data_path("reference_record.jsonl"),
                    "--endpoint-url", server.base_url]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["description"] == SAMPLE_DESCRIPTION
    assert doc["violations"] == []


def test_optimize_command_writes_trace_and_best(stub, tmp_path, capsys):
    def script(request):
        content = request["messages"][-1]["content"]
        if content.startswith("You write task instructions"):
            return {"text": "Generated variant: " + digest_pick(content, ["A", "B", "C", "D"])}
        return {"text": digest_pick(content, ["Entailment", "Contradiction", "Neutral"])}

    server = stub(script)
    budget = tmp_path / "budget.json"
    budget.write_text(json.dumps({
        "n_candidates": 3, "eval_calls_max": 200, "rung_sizes": [2, 5], "metric": "micro_f1",
    }))
    out_dir = tmp_path / "opt"
    assert run_cli(["optimize", "--task", "mednli", "--budget", budget,
                    "--records", data_path("mednli.jsonl"),
                    "--endpoint-url", server.base_url, "--out-dir", out_dir]) == 0
    trace = [json.loads(l) for l in (out_dir / "trace.jsonl").read_text().splitlines()]
    assert trace and all(row["metric"] == "micro_f1" for row in trace)
    best = json.loads((out_dir / "best.json").read_text())
    assert best["text"]
    assert best["calls_used"] <= 200


def test_run_and_report_commands(stub, tmp_path, capsys):
    server = stub(fixed_script("Neutral"))
    config = tmp_path / "run.json"
    config.write_text(json.dumps({
        "task": "mednli",
        "records": str(data_path("mednli.jsonl")),
        "repetitions": 2,
        "endpoint": {"base_url": server.base_url, "model": "stub-model",
                     "backoff_base_s": 0.01},
    }))
    out_dir = tmp_path / "run"
    assert run_cli(["run", "--config", config, "--out-dir", out_dir]) == 0
    assert (out_dir / "report.json").exists()
    capsys.readouterr()

    assert run_cli(["report", "--run-dir", out_dir]) == 0
    printed = capsys.readouterr().out
    assert "task: mednli" in printed
    assert "micro_f1" in printed
    assert "wall_time_s_total" in printed


def test_time_command(stub, tmp_path, capsys):
    server = stub()
    config = tmp_path / "run.json"
    config.write_text(json.dumps({
        "task": "mednli",
        "records": str(data_path("mednli.jsonl")),
        "endpoint": {"base_url": server.base_url, "model": "stub-model"},
    }))
    assert run_cli(["time", "--config", config, "--n", 4]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["n_samples"] == 4
    assert doc["energy_j"] == "unavailable"
    assert doc["per_100_s"] == pytest.approx(doc["total_s"] * 25)
