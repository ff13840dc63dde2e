import json
import subprocess
import sys
from pathlib import Path

import pytest

from tokenshift.cli import UsageError, parse_toy, run
from tokenshift.policies import Trajectory, dump_from_policies, write_dump
from tokenshift.report import read_csv, sig9

from .helpers import toy_pair

TOY = "V=5,T=8,order=2,seed=3"


def files(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def load(path: Path):
    return json.loads(path.read_text())


@pytest.fixture
def dump_file(tmp_path):
    base, rl = toy_pair(0, 6)
    trajs = [Trajectory(f"q{i}", tuple((i * 3 + j) % 5 for j in range(6))) for i in range(5)]
    path = tmp_path / "dump.ndjson"
    write_dump(path, dump_from_policies(base, rl, trajs, top_k=4))
    return path


def test_parse_toy():
    t = parse_toy("V=4,T=3,kind=softmax-ngram,eos=1")
    assert t["V"] == 4 and t["T"] == 3 and t["kind"] == "softmax-ngram" and t["eos"] == 1
    with pytest.raises(UsageError):
        parse_toy("V=4,bogus=1")


def test_analyze_toy_json_and_csv(tmp_path):
    out = tmp_path / "o"
    assert run(["analyze", "--toy", TOY, "--n-seqs", "6", "--seed", "1", "--out", str(out), "--format", "json,csv"]) == 0
    recs = load(out / "records.json")
    assert recs["meta"]["tool"] == "tokenshift" and recs["meta"]["subcommand"] == "analyze"
    assert recs["meta"]["seed"] == 1 and len(recs["meta"]["config_hash"]) == 16
    assert {"seq_id", "pos", "js", "base_entropy", "rl_rank_of_sampled"} <= set(recs["data"][0])
    meta, rows = read_csv(out / "records.csv")
    assert meta == recs["meta"] and len(rows) == len(recs["data"])
    assert float(rows[0]["js"]) == recs["data"][0]["js"]
    hist = load(out / "histogram.json")["data"]
    assert sum(hist["counts"]) == len(recs["data"])


def test_analyze_dump(tmp_path, dump_file):
    out = tmp_path / "o"
    assert run(["analyze", "--input", str(dump_file), "--out", str(out)]) == 0
    s = load(out / "summary.json")
    assert s["data"]["n_records"] == 30 and s["meta"]["entropy"] == "truncated-entropy"


def test_aggregates_rounded_to_nine_digits(tmp_path):
    out = tmp_path / "o"
    run(["analyze", "--toy", TOY, "--n-seqs", "4", "--out", str(out)])
    for row in load(out / "percentiles.json")["data"]:
        assert row["js"] == sig9(row["js"])


def test_missing_input_exit_1(tmp_path, capsys):
    missing = tmp_path / "nope.ndjson"
    assert run(["analyze", "--input", str(missing), "--out", str(tmp_path)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_usage_errors_exit_1(tmp_path):
    assert run(["analyze", "--toy", TOY, "--format", "xml", "--out", str(tmp_path)]) == 1
    assert run(["analyze", "--toy", TOY, "--jobs", "0", "--out", str(tmp_path)]) == 1
    assert run(["nonsense"]) == 1
    assert run(["cross-sample", "--out", str(tmp_path)]) == 1


def test_bad_dump_exit_1(tmp_path):
    bad = tmp_path / "bad.ndjson"
    bad.write_text('{"meta": {"vocab_size": 3}}\n{"seq_id": "a"}\n')
    assert run(["analyze", "--input", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_mechanics(tmp_path):
    w1, w2 = tmp_path / "a.json", tmp_path / "b.json"
    w1.write_text("[1, 1]")
    w2.write_text("[1, 0]")
    out = tmp_path / "o"
    code = run(["mechanics", "--toy", "V=6,T=10,scale=3", "--n-seqs", "8", "--checkpoints", "3",
                "--weights", str(w1), str(w2), "--out", str(out)])
    assert code == 0
    data = load(out / "mechanics.json")["data"]
    assert data["weight_gap_ratio"] == pytest.approx(1 / 3)
    assert len(data["checkpoint_evolution"]) == 3


def test_cross_sample_budget_zero(tmp_path):
    out = tmp_path / "o"
    assert run(["cross-sample", "--toy", TOY, "--budget", "0", "--n-samples", "20", "--epsilon", "0.0", "--out", str(out)]) == 0
    lines = (out / "traces.ndjson").read_text().splitlines()
    assert "meta" in json.loads(lines[0])
    traces = [json.loads(l) for l in lines[1:]]
    assert len(traces) == 20
    assert all(t["total_count"] == 0 and t["interventions"] == [] for t in traces)


def test_cross_sample_sweep(tmp_path):
    out = tmp_path / "o"
    code = run(["cross-sample", "--toy", TOY, "--budgets", "0,1,2,inf", "--n-samples", "30",
                "--predicate", "contains-token:1", "--out", str(out)])
    assert code == 0
    pts = load(out / "sweep.json")["data"]["points"]
    assert [p["budget"] for p in pts] == [0, 1, 2, None]
    assert pts[0]["mean_total"] == 0


def test_verify_bounds(tmp_path):
    out = tmp_path / "o"
    assert run(["verify-bounds", "--toy", "V=3,T=4", "--seeds", "3", "--out", str(out)]) == 0
    data = load(out / "verify_bounds.json")["data"]
    assert data["all_pass"] is True


def test_weights(tmp_path):
    rows = tmp_path / "rows.json"
    rows.write_text(json.dumps([{"ratio": 1.5, "advantage": 1.0, "kl": 0.0}, {"ratio": 2.0, "advantage": -1.0}]))
    out = tmp_path / "o"
    assert run(["weights", "--input", str(rows), "--format", "json,csv", "--out", str(out)]) == 0
    data = load(out / "weights.json")["data"]
    assert data[0]["surrogate"] == 1.28 and data[1]["kl_source"] == "k3-sampled"
    _, csv_rows = read_csv(out / "weights.csv")
    assert csv_rows[1]["kl_source"] == "k3-sampled"
    bad = tmp_path / "bad.json"
    bad.write_text('[{"ratio": -1, "advantage": 1}]')
    assert run(["weights", "--input", str(bad), "--out", str(out)]) == 1


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"toy": TOY, "n_seqs": 3, "seed": 5}))
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["analyze", "--config", str(cfg), "--out", str(a)]) == 0
    assert run(["analyze", "--toy", TOY, "--n-seqs", "3", "--seed", "5", "--out", str(b)]) == 0
    assert files(a) == files(b)
    c = tmp_path / "c"
    assert run(["analyze", "--config", str(cfg), "--seed", "6", "--out", str(c)]) == 0
    assert load(c / "records.json")["meta"]["seed"] == 6


def test_out_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("TOKENSHIFT_OUT", str(tmp_path / "env"))
    assert run(["analyze", "--toy", TOY, "--n-seqs", "2"]) == 0
    assert (tmp_path / "env" / "records.json").exists()


@pytest.mark.parametrize(
    "argv",
    [
        ["analyze", "--toy", TOY, "--n-seqs", "4", "--format", "json,csv"],
        ["mechanics", "--toy", "V=6,T=10,scale=3", "--n-seqs", "6", "--checkpoints", "2"],
        ["cross-sample", "--toy", TOY, "--n-samples", "25"],
        ["cross-sample", "--toy", TOY, "--budgets", "0,2,inf", "--n-samples", "25", "--predicate", "count-token:1:2", "--jobs", "2"],
        ["verify-bounds", "--toy", "V=3,T=3", "--seeds", "2"],
    ],
)
def test_byte_identical_reruns(tmp_path, argv):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(argv + ["--seed", "4", "--out", str(a)]) == 0
    assert run(argv + ["--seed", "4", "--out", str(b)]) == 0
    assert files(a) == files(b)


def test_console_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "tokenshift.cli", "selftest"], capture_output=True, text=True, timeout=300
    )
    assert res.returncode == 0, res.stdout + res.stderr
    assert "all checks passed" in res.stdout
