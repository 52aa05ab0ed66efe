import csv
import json
import subprocess
import sys

import pytest

from dse.cli import CSV_COLUMNS, load_faults, main, parse_seeds
from dse.sim.scenarios import InvalidSpec

FAST = ["--duration", "200", "--quiet"]


def test_parse_seeds():
    assert parse_seeds("3") == (3,)
    assert parse_seeds("0-2,7") == (0, 1, 2, 7)
    for bad in ("", "x", "5-2"):
        with pytest.raises(InvalidSpec):
            parse_seeds(bad)


def test_run_writes_csv_trace_and_summary(tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--scenario", "chain", "--seeds", "0-1", "--out", str(out)] + FAST) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["version"] == 1 and summary["oracles_pass"] is True
    assert summary["scenario"] == "chain" and summary["mode"] == "speculative"
    assert [s["seed"] for s in summary["seeds"]] == [0, 1]
    seed = summary["seeds"][0]
    for key in ("issued", "completed", "mean_latency_ms", "p95_latency_ms", "oracles", "csv", "trace", "recovery_ms", "coordinator_log_entries"):
        assert key in seed
    with open(out / seed["csv"]) as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == CSV_COLUMNS == ("rid", "start_ms", "end_ms", "latency_ms", "ok", "aborted", "attempts", "replied")
    assert len(rows) - 1 == seed["issued"]
    assert (out / seed["trace"]).exists()


def test_default_subcommand_and_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("DSE_OUT", str(tmp_path / "env"))
    assert main(["--scenario", "counter", "--seed", "2", "--out", str(tmp_path / "ignored")] + FAST) == 0
    assert (tmp_path / "env" / "summary.json").exists()
    assert not (tmp_path / "ignored").exists()


def test_faults_file(tmp_path):
    f = tmp_path / "faults.json"
    f.write_text(json.dumps({"faults": [{"t": 80, "kind": "crash", "target": 2}, {"t": 100, "kind": "restart", "target": 2}]}))
    assert [x.kind for x in load_faults(f)] == ["crash", "restart"]
    out = tmp_path / "o"
    assert main(["--scenario", "recovery-chain", "--faults", str(f), "--out", str(out)] + FAST) == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["params"]["faults"][0] == {"t": 80.0, "kind": "crash", "target": 2}


def test_bad_inputs_exit_2(tmp_path, capsys):
    bad = tmp_path / "faults.json"
    bad.write_text('[{"t": 1, "kind": "melt"}]')
    assert main(["--faults", str(bad), "--out", str(tmp_path)] + FAST) == 2
    assert main(["--faults", str(tmp_path / "missing.json"), "--out", str(tmp_path)] + FAST) == 2
    assert main(["--commit-period", "0", "--out", str(tmp_path)] + FAST) == 2
    bad.write_text('[{"t": 1, "kind": "crash", "target": 2}, {"t": 1, "kind": "restart", "target": 2}]')
    assert main(["--faults", str(bad), "--out", str(tmp_path)] + FAST) == 2
    bad.write_text('[{"t": 1, "kind": "crash", "target": 9}]')
    assert main(["--faults", str(bad), "--out", str(tmp_path)] + FAST) == 2
    assert "InvalidSpec" in capsys.readouterr().err


def test_check_passes_clean_trace(tmp_path, capsys):
    main(["--scenario", "chain", "--out", str(tmp_path)] + FAST)
    capsys.readouterr()
    assert main(["check", str(tmp_path / "chain-speculative-s0.trace.jsonl")]) == 0
    out = capsys.readouterr().out
    assert "closure: pass" in out and "silence: pass" in out


def test_check_reports_first_violation(tmp_path, capsys):
    p = tmp_path / "t.jsonl"
    p.write_text(
        '{"i": 0, "t": 0, "kind": "plan", "seq": 1}\n'
        '{"i": 1, "t": 1, "kind": "session_release", "session": "s", "value": 2}\n'
    )
    assert main(["check", str(p)]) == 1
    out = capsys.readouterr().out
    assert "silence: FAIL (1 violations); first at record 0" in out
    assert "release: FAIL" in out and '"value": 2' in out
    assert main(["check", str(p), "--oracle", "closure"]) == 0


def test_check_malformed_trace(tmp_path, capsys):
    p = tmp_path / "t.jsonl"
    p.write_text("not json\n")
    assert main(["check", str(p)]) == 2
    p.write_text('{"i": 0, "t": 0, "kind": "persist"}\n')
    assert main(["check", str(p)]) == 2
    assert "MalformedTrace" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "dse", "--scenario", "counter", "--out", str(tmp_path)] + FAST, capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
