import json
import subprocess
import sys

import pytest

from learncbba.bidding import init_policy
from learncbba.bidding.checkpoint import save_policy
from learncbba.cli import main
from learncbba.eval import read_records
from learncbba.oracle import OracleCache, brute_force
from learncbba.world import read_worlds


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.jsonl"
    assert run("gen", "--agents", 2, "--tasks", "3..6", "--count", 8, "--sides", "10..20", "--out", path) == 0
    return path


@pytest.fixture
def lstm_ckpt(tmp_path):
    path = tmp_path / "lstm.json"
    save_policy(path, init_policy("lstm", 3, hidden=8))
    return path


def test_gen_training_preset(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run("gen", "--preset", "training", "--seed", 1, "--out", a) == 0
    assert run("gen", "--preset", "training", "--seed", 1, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    worlds = read_worlds(a)
    assert len(worlds) == 1000
    assert all(w.n_agents == 5 and 10 <= w.n_tasks <= 20 and 25 <= w.workspace_side <= 55 for w in worlds)


def test_gen_single_world(tmp_path):
    out = tmp_path / "one.jsonl"
    assert run("gen", "--agents", 5, "--tasks", "3..3", "--count", 1, "--out", out) == 0
    (w,) = read_worlds(out)
    assert w.n_tasks == 3 and w.n_agents == 5


@pytest.mark.parametrize(
    "argv",
    [
        ["gen"],
        ["gen", "--count", "3"],
        ["gen", "--agents", "2", "--tasks", "5..2"],
        ["gen", "--preset", "val5", "--agents", "3"],
        ["gen", "--preset", "nope"],
        ["frobnicate"],
    ],
)
def test_usage_errors(tmp_path, argv, capsys):
    assert run(*argv, "--out", tmp_path / "x.jsonl") == 1
    assert not (tmp_path / "x.jsonl").exists()
    assert "error" in capsys.readouterr().err


def test_oracle_exact_and_idempotent(tmp_path, tiny, capsys):
    out = tmp_path / "oracle.jsonl"
    assert run("oracle", "--worlds", tiny, "--out", out) == 0
    assert "solved 8" in capsys.readouterr().out
    cache = OracleCache.load(out)
    for w in read_worlds(tiny):
        assert cache[w.id].proof_of_optimality
        assert cache[w.id].total_distance == pytest.approx(brute_force(w).total_distance, abs=1e-9)
    before = out.read_bytes()
    assert run("oracle", "--worlds", tiny, "--out", out) == 0
    assert "cache hits 8, solved 0" in capsys.readouterr().out
    assert out.read_bytes() == before


def test_oracle_missing_dataset(tmp_path):
    out = tmp_path / "oracle.jsonl"
    assert run("oracle", "--worlds", tmp_path / "nope.jsonl", "--out", out) != 0
    assert not out.exists()


def test_solve_classic(tmp_path, tiny):
    out = tmp_path / "runs.jsonl"
    assert run("solve", "--worlds", tiny, "--bidder", "classic", "--out", out) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 8
    assert {"world_id", "bidder", "paths", "iterations", "timed_out", "total_distance"} <= set(rows[0])
    assert all(r["bidder"] == "classic" and not r["timed_out"] for r in rows)


def test_solve_learned_is_deterministic(tmp_path, tiny, lstm_ckpt):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        assert run("solve", "--worlds", tiny, "--bidder", "lstm", "--checkpoint", lstm_ckpt, "--out", out) == 0
    assert a.read_bytes() == b.read_bytes()


def test_solve_unknown_bidder(tmp_path, tiny, capsys):
    assert run("solve", "--worlds", tiny, "--bidder", "greedy", "--out", tmp_path / "r.jsonl") == 1
    err = capsys.readouterr().err
    assert "classic" in err and "nam" in err and "lstm" in err


def test_learned_bidder_needs_checkpoint(tmp_path, tiny):
    assert run("solve", "--worlds", tiny, "--bidder", "nam", "--out", tmp_path / "r.jsonl") == 1


def test_eval_and_report(tmp_path, tiny, lstm_ckpt, capsys):
    records = tmp_path / "records.csv"
    oracle = tmp_path / "oracle.jsonl"
    code = run(
        "eval", "--worlds", tiny, "--bidder", "classic", "--bidder", f"mine={lstm_ckpt}",
        "--oracle", oracle, "--out", records, "--jobs", 2,
    )
    assert code == 0
    assert "classic n_agents=2" in capsys.readouterr().out
    rows = read_records(records)
    assert len(rows) == 16 and {r.bidder for r in rows} == {"classic", "mine"}
    assert OracleCache.load(oracle).get(rows[0].world_id) is not None
    first = records.read_bytes()
    assert run("eval", "--worlds", tiny, "--bidder", "classic", "--bidder", f"mine={lstm_ckpt}",
               "--oracle", oracle, "--out", records) == 0
    assert records.read_bytes() == first

    report = tmp_path / "report"
    assert run("report", records, "--out", report) == 0
    summary = json.loads((report / "summary.json").read_text())
    assert set(summary) == {"classic/2", "mine/2"}
    assert summary["classic/2"]["count"] == 8
    assert (report / "boxplot.json").exists() and (report / "records.csv").exists()


def test_eval_corrupt_checkpoint_writes_nothing(tmp_path, tiny, lstm_ckpt):
    lstm_ckpt.with_suffix(".bin").write_bytes(b"junk")
    out = tmp_path / "records.csv"
    assert run("eval", "--worlds", tiny, "--bidder", "classic", "--bidder", f"x={lstm_ckpt}", "--out", out) == 2
    assert not out.exists()


def test_report_missing_input(tmp_path):
    assert run("report", tmp_path / "none.csv", "--out", tmp_path / "rep") == 1


def test_out_must_match_kind(tmp_path, tiny):
    assert run("solve", "--worlds", tiny, "--out", tmp_path) == 1
    assert run("report", tiny, "--out", tiny) == 1


@pytest.mark.parametrize(
    "config",
    [{"runs": {}}, {"run": {"max_iters": 3}}, {"ppo": {"clip": 2.0}}, "not json"],
)
def test_bad_config(tmp_path, tiny, config):
    path = tmp_path / "c.json"
    path.write_text(config if isinstance(config, str) else json.dumps(config))
    argv = ["--worlds", tiny, "--config", path, "--out", tmp_path / "o"]
    assert run("train", "--epochs", 0, *argv) == 1


def test_flag_overrides_config(tmp_path, tiny):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"run": {"max_iterations": 1}}))
    out = tmp_path / "r.jsonl"
    assert run("solve", "--worlds", tiny, "--config", path, "--out", out) == 0
    assert all(json.loads(line)["iterations"] <= 1 for line in out.read_text().splitlines())
    assert run("solve", "--worlds", tiny, "--config", path, "--max-iterations", 50, "--out", out) == 0
    assert not any(json.loads(line)["timed_out"] for line in out.read_text().splitlines())


def _train_config(tmp_path):
    path = tmp_path / "train.json"
    path.write_text(json.dumps({
        "train": {"probe_size": 2, "hidden": 6, "checkpoint_every": 1},
        "ppo": {"worlds_per_epoch": 3, "minibatch_size": 2, "epochs_per_batch": 1},
    }))
    return path


def test_train_resume_and_reproducibility(tmp_path, tiny):
    cfg = _train_config(tmp_path)
    common = ["--worlds", tiny, "--arch", "lstm", "--config", cfg, "--seed", 5, "--oracle", tmp_path / "o.jsonl"]
    assert run("train", *common, "--epochs", 2, "--out", tmp_path / "full") == 0
    assert run("train", *common, "--epochs", 2, "--out", tmp_path / "again") == 0
    assert run("train", *common, "--epochs", 1, "--out", tmp_path / "part") == 0
    assert run("train", *common, "--epochs", 2, "--resume", "--out", tmp_path / "part") == 0
    for name in ("curve.csv", "actor_last.bin", "actor_best.bin", "critic.bin"):
        full = (tmp_path / "full" / name).read_bytes()
        assert (tmp_path / "again" / name).read_bytes() == full
        assert (tmp_path / "part" / name).read_bytes() == full


def test_train_resume_needs_state(tmp_path, tiny):
    assert run("train", "--worlds", tiny, "--epochs", 1, "--resume", "--out", tmp_path / "fresh") == 1


def test_train_nam_from_checkpoint(tmp_path, tiny):
    ckpt = tmp_path / "nam.json"
    save_policy(ckpt, init_policy("nam", 1))
    cfg = _train_config(tmp_path)
    out = tmp_path / "run"
    assert run("train", "--worlds", tiny, "--checkpoint", ckpt, "--epochs", 1, "--config", cfg, "--out", out) == 0
    assert (out / "actor_best.json").exists() and (out / "curve.csv").exists()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "learncbba", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen" in proc.stdout and "report" in proc.stdout


def test_train_arch_must_match_checkpoint(tmp_path, tiny):
    ckpt = tmp_path / "nam.json"
    save_policy(ckpt, init_policy("nam", 1))
    assert run("train", "--worlds", tiny, "--checkpoint", ckpt, "--arch", "lstm", "--epochs", 0, "--out", tmp_path / "r") == 1
