import json
import subprocess
import sys
from pathlib import Path

import pytest

from shardwise import models
from shardwise.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from shardwise.mesh import CommReport
from shardwise.modelspec import SpecError, parse_model_spec
from shardwise.shardplan import FC, QKV, ShardingPlan, element_counts, plan_for

DATA = Path(__file__).parent / "data"


def run(*argv):
    return main([str(a) for a in argv])


# model spec -------------------------------------------------------------------------

def test_parse_model_spec():
    spec = parse_model_spec("""
        # toy
        vocab_size = 40
        n_layers = 3
        d_model = 24
        n_heads = 3
        d_ff = 48
        tie_embeddings = true
        role block_*/mlp/fc2/* = FullyConnected(0)
        role block_*/attn/q/* = AttentionQKV
    """)
    assert spec.config.vocab_size == 40 and spec.config.tie_embeddings
    assert spec.overrides == {"block_*/mlp/fc2/*": FC(0), "block_*/attn/q/*": QKV}
    assert parse_model_spec(spec.to_text()) == spec


@pytest.mark.parametrize("text, msg", [
    ("vocab_size = 4\nn_layers = 1\nd_model = 6\nn_heads = 4\nd_ff = 8", "divisible"),
    ("vocab_size = 4\nn_layers = 0\nd_model = 4\nn_heads = 2\nd_ff = 8", "positive"),
    ("vocab_size = 4\nn_layers = 1\nd_model = 4\nn_heads = 2", "d_ff"),
    ("vocab_size = 4\nvocab_size = 5", "duplicate"),
    ("colour = 4", "unknown"),
    ("vocab_size = four", "line 1"),
])
def test_bad_model_specs(text, msg):
    with pytest.raises(SpecError, match=msg):
        parse_model_spec(text)


# exit codes ----------------------------------------------------------------------------

def test_usage_errors_exit_2(tmp_path, capsys):
    assert run("train", "no-such-example", "--workdir", tmp_path) == EXIT_USAGE
    assert run("plan") == EXIT_USAGE
    assert run("plan", "--n-shards", 0, "--workdir", tmp_path) == EXIT_USAGE
    assert run("audit", "--plan", tmp_path / "missing.txt", "--workdir", tmp_path) == EXIT_USAGE
    assert run("frobnicate") == EXIT_USAGE


def test_validation_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.spec"
    bad.write_text("vocab_size = 8\nn_layers = 1\nd_model = 6\nn_heads = 4\nd_ff = 8\n")
    assert run("plan", "--spec", bad, "--n-shards", 2, "--workdir", tmp_path) == EXIT_FAIL
    assert "divisible" in capsys.readouterr().err
    # a plan for a different shard count than the audit mesh
    assert run("plan", "--n-shards", 4, "--workdir", tmp_path / "p4") == EXIT_OK
    assert run("audit", "--mp", 2, "--plan", tmp_path / "p4" / "plan.txt", "--workdir", tmp_path) == EXIT_FAIL


def test_console_script_module_entry(tmp_path):
    out = subprocess.run([sys.executable, "-m", "shardwise", "plan", "--n-shards", "2", "--workdir", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert "split:0" in out.stdout


# plan -----------------------------------------------------------------------------------

def test_plan_matches_golden_and_writes_files(tmp_path, capsys):
    assert run("plan", "--spec", DATA / "toy4.spec", "--n-shards", 2, "--workdir", tmp_path) == EXIT_OK
    assert (tmp_path / "plan.txt").read_text() == (DATA / "toy4_n2.plan").read_text()
    rows = (tmp_path / "shard_sizes.csv").read_text().splitlines()
    assert rows[0] == "name,global_shape,partition,local_shape,local_elements"
    fc1 = next(r for r in rows if r.startswith("block_0/mlp/fc1/kernel,"))
    assert fc1 == "block_0/mlp/fc1/kernel,64x32,split:0,32x32,1024"


@pytest.mark.parametrize("n", [1, 2, 4])
def test_memory_summary_matches_formula(tmp_path, n):
    assert run("plan", "--n-shards", n, "--workdir", tmp_path) == EXIT_OK
    summary = dict(line.split("=") for line in (tmp_path / "memory.txt").read_text().split())
    params = models.init_transformer(models.TransformerConfig(32, 2, 32, 4, 64, max_len=16))
    rep, split = element_counts(plan_for(params, n), params)
    assert int(summary["per_device_param_elements"]) == rep + split // n
    assert int(summary["per_device_param_and_adam_elements"]) == 3 * (rep + split // n)
    if n == 1:
        assert int(summary["per_device_param_elements"]) == sum(v.size for v in params.values())


# audit ----------------------------------------------------------------------------------

def test_plan_then_audit_round_trip(tmp_path, capsys):
    assert run("plan", "--n-shards", 2, "--workdir", tmp_path / "plan") == EXIT_OK
    plan = ShardingPlan.load(tmp_path / "plan" / "plan.txt")
    assert run("audit", "--mp", 2, "--dp", 2, "--plan", tmp_path / "plan" / "plan.txt",
               "--workdir", tmp_path / "a") == EXIT_OK
    out = capsys.readouterr().out
    assert "PASS" in out
    assert plan.n_shards == 2
    dev = float(next(l for l in out.splitlines() if l.startswith("param")).split("=")[1].split()[0])
    assert dev <= 1e-10


def test_audit_single_device_has_no_traffic(tmp_path):
    assert run("audit", "--mp", 1, "--dp", 1, "--workdir", tmp_path) == EXIT_OK
    rep = CommReport.from_csv((tmp_path / "comm_report.csv").read_text())
    assert rep.total_payload_bytes == 0 and rep.total_wire_bytes == 0


def test_audit_rule_plan_beats_same_dim(tmp_path):
    assert run("audit", "--mp", 2, "--steps", 1, "--baseline", "same-dim", "--workdir", tmp_path) == EXIT_OK
    rule = CommReport.from_csv((tmp_path / "comm_report.csv").read_text())
    base = CommReport.from_csv((tmp_path / "comm_report_baseline.csv").read_text())
    assert rule.total_payload_bytes < base.total_payload_bytes


# train / predict ----------------------------------------------------------------------------

def test_train_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run("train", "char-lm", "--seed", 42, "--steps", 15, "--workdir", tmp_path / name) == EXIT_OK
    a, b = ((tmp_path / n / "run.log").read_bytes() for n in ("a", "b"))
    assert a == b
    assert sum(1 for l in a.decode().splitlines() if l.startswith("step=")) == 15
    metrics = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert metrics["steps"] == 15 and metrics["final_loss"] < metrics["initial_loss"]


def test_train_dp_and_mp_agree(tmp_path, capsys):
    finals = []
    for dp, mp in ((1, 1), (2, 2)):
        wd = tmp_path / f"{dp}{mp}"
        assert run("train", "char-lm", "--steps", 10, "--dp", dp, "--mp", mp, "--workdir", wd) == EXIT_OK
        finals.append(json.loads((wd / "metrics.json").read_text())["final_loss"])
    assert abs(finals[1] - finals[0]) <= 1e-4 * abs(finals[0])


def test_bad_batch_flags(tmp_path, capsys):
    assert run("train", "char-lm", "--dp", 3, "--steps", 1, "--workdir", tmp_path) == EXIT_USAGE
    assert run("train", "char-lm", "--global-batch-size", 8, "--per-device-batch-size", 4,
               "--workdir", tmp_path) == EXIT_USAGE


def test_maml_quadratic_debug_trace(tmp_path, capsys):
    assert run("train", "maml-sinusoid", "--task", "quadratic", "--workdir", tmp_path) == EXIT_OK
    trace = (tmp_path / "debug.log").read_text()
    assert "theta=1.0 alpha=0.1 theta_adapted=0.8" in trace


def test_predict_from_checkpoint(tmp_path, capsys):
    assert run("train", "char-lm", "--steps", 5, "--workdir", tmp_path) == EXIT_OK
    prompts = tmp_path / "prompts.txt"
    prompts.write_text("a stitch in time\nwaste not want n\n")
    ckpt = tmp_path / "ckpt" / "last.swck"
    assert run("predict", "char-lm", "--checkpoint", ckpt, "--inputs", prompts, "--workdir", tmp_path) == EXIT_OK
    lines = (tmp_path / "predictions.txt").read_text().splitlines()
    assert len(lines) == 2
    prompts.write_text("too short\n")
    assert run("predict", "char-lm", "--inputs", prompts, "--workdir", tmp_path) == EXIT_USAGE


def test_comm_sweep_script(tmp_path):
    script = Path(__file__).parents[1] / "scripts" / "comm_sweep.py"
    out = tmp_path / "sweep.csv"
    res = subprocess.run([sys.executable, str(script), "--hidden", "64", "--n-shards", "2", "--out", str(out)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    rows = out.read_text().splitlines()
    assert rows[0] == "hidden,n_shards,plan,all_reduce,all_gather,payload_bytes,wire_bytes"
    assert rows[1] == "64,2,rule,1,0,512,1024"
    assert rows[2].startswith("64,2,same-dim,0,2,")
