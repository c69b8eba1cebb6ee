import json
import subprocess
import sys

import numpy as np
import pytest

from streamkv.cli import main
from streamkv.metrics import parse_csv_report


def run_cli(*argv):
    return main(list(argv))


def test_generate_trace_zero_rounds_header_only(tmp_path):
    out = tmp_path / "t.imtrace"
    assert run_cli("generate-trace", "--rounds", "0", "--seed", "1", "--out", str(out)) == 0
    assert out.stat().st_size == 20


def test_generate_trace_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.imtrace", tmp_path / "b.imtrace"
    args = ["generate-trace", "--rounds", "5", "--saddles", "4", "--seed", "7"]
    assert run_cli(*args, "--out", str(a)) == 0
    assert run_cli(*args, "--out", str(b)) == 0
    assert a.read_bytes() == b.read_bytes()


def test_generate_trace_invalid_gain_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        run_cli("generate-trace", "--rounds", "2", "--gain", "0.5", "--seed", "1",
                "--out", str(tmp_path / "x.imtrace"))
    assert err.value.code == 2


def test_seed_required():
    with pytest.raises(SystemExit) as err:
        run_cli("simulate", "--policy", "none")
    assert err.value.code == 2


def test_simulate_none_oracle_full_mass(tmp_path):
    out = tmp_path / "m.csv"
    code = run_cli(
        "simulate", "--policy", "none", "--oracle", "--seed", "3",
        "--rounds", "3", "--prompt-len", "5", "--decode-len", "2",
        "--recent", "4", "--relevant", "8", "--metrics", str(out),
    )
    assert code == 0
    rows = parse_csv_report(out.read_bytes())
    assert len(rows) == 3
    assert all(r.retained_mass == pytest.approx(1.0, abs=1e-5) for r in rows)


def test_simulate_budget_bound(tmp_path):
    out = tmp_path / "m.csv"
    code = run_cli(
        "simulate", "--policy", "inf-mllm", "--seed", "3",
        "--rounds", "6", "--prompt-len", "12", "--decode-len", "4",
        "--recent", "4", "--relevant", "12", "--metrics", str(out),
    )
    assert code == 0
    rows = parse_csv_report(out.read_bytes())
    assert all(r.cache_len <= 16 for r in rows)


def test_simulate_incompatible_flags_usage_error():
    with pytest.raises(SystemExit) as err:
        run_cli("simulate", "--policy", "window", "--bias", "0.5", "--seed", "1")
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        run_cli("simulate", "--policy", "inf-mllm", "--sink", "2", "--seed", "1")
    assert err.value.code == 2


def test_simulate_deterministic_metrics(tmp_path):
    outs = []
    for name in ("a.csv", "b.csv"):
        out = tmp_path / name
        run_cli(
            "simulate", "--policy", "heavy-hitter", "--seed", "11",
            "--rounds", "4", "--prompt-len", "6", "--decode-len", "2",
            "--recent", "3", "--relevant", "6", "--metrics", str(out),
        )
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_replay_uniform_trace_zero_bias(tmp_path):
    trace = tmp_path / "u.imtrace"
    run_cli("generate-trace", "--rounds", "6", "--prompt-len", "6", "--decode-len", "2",
            "--saddles", "0", "--seed", "5", "--out", str(trace))
    out = tmp_path / "m.csv"
    code = run_cli(
        "replay", "--trace", str(trace), "--policy", "inf-mllm", "--bias", "0.0",
        "--recent", "2", "--relevant", "4", "--metrics", str(out),
    )
    assert code == 0
    rows = parse_csv_report(out.read_bytes())
    assert len(rows) == 6
    assert all(r.cache_len <= 6 for r in rows)


def test_replay_deterministic(tmp_path):
    trace = tmp_path / "t.imtrace"
    run_cli("generate-trace", "--rounds", "5", "--saddles", "4", "--seed", "9",
            "--out", str(trace))
    outs = []
    for name in ("a.csv", "b.csv"):
        out = tmp_path / name
        run_cli("replay", "--trace", str(trace), "--policy", "inf-mllm",
                "--recent", "4", "--relevant", "8", "--metrics", str(out))
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_replay_bad_trace_exit_1(tmp_path):
    bad = tmp_path / "bad.imtrace"
    bad.write_bytes(b"NOPE" + b"\x00" * 30)
    code = run_cli("replay", "--trace", str(bad), "--policy", "none")
    assert code == 1


def test_replay_missing_file_exit_1(tmp_path):
    code = run_cli("replay", "--trace", str(tmp_path / "missing.imtrace"), "--policy", "none")
    assert code == 1


def test_compare_policy_with_itself_identical(tmp_path):
    report = tmp_path / "r.json"
    code = run_cli(
        "compare", "--policies", "window,window", "--seed", "2",
        "--rounds", "3", "--prompt-len", "6", "--decode-len", "2",
        "--recent", "3", "--relevant", "6", "--report", str(report),
    )
    assert code == 0
    data = json.loads(report.read_text())
    assert data["policies"]["window"]["rounds"] == 3


def test_compare_summary_matches_csv_means(tmp_path):
    report = tmp_path / "r.json"
    mdir = tmp_path / "metrics"
    trace = tmp_path / "t.imtrace"
    run_cli("generate-trace", "--rounds", "8", "--saddles", "4", "--seed", "3",
            "--out", str(trace))
    code = run_cli(
        "compare", "--policies", "inf-mllm,window", "--seed", "2",
        "--trace", str(trace), "--recent", "4", "--relevant", "8",
        "--report", str(report), "--metrics-dir", str(mdir),
    )
    assert code == 0
    data = json.loads(report.read_text())
    for policy in ("inf-mllm", "window"):
        rows = parse_csv_report((mdir / f"{policy}.csv").read_bytes())
        masses = [r.retained_mass for r in rows if r.retained_mass is not None]
        assert data["policies"][policy]["retained_mass"] == pytest.approx(
            float(np.mean(masses)), rel=1e-6
        )


def test_compare_unknown_policy_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        run_cli("compare", "--policies", "inf-mllm,bogus", "--seed", "1",
                "--report", str(tmp_path / "r.json"))
    assert err.value.code == 2


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "streamkv.cli", "--help"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert "generate-trace" in proc.stdout
