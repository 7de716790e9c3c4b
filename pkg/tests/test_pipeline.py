import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shardwise import models, ops
from shardwise.audit import rel_dev
from shardwise.examples import char_lm
from shardwise.mesh import MeshError
from shardwise.pipeline.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from shardwise.pipeline.config import PipelineSpec, RunConfig
from shardwise.pipeline.deployer import Deployer, linear_warmup_decay
from shardwise.pipeline.predictor import PredictionError, Predictor
from shardwise.pipeline.trainer import Trainer, TrainingError
from shardwise.shardplan import plan_for
from shardwise.spmd import TrainState, gather_params, shard_params


def regression_pipeline(n=64, d=4, seed=0):
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal((1, d))
    xs = rng.standard_normal((n, d))
    examples = [{"x": x, "y": x @ w_true[0]} for x in xs]

    def collate_fn(exs):
        return {"x": np.stack([e["x"] for e in exs]), "y": np.array([[e["y"]] for e in exs])}

    def loss_fn(rng, batch, p):
        return ops.mse(models.mlp_forward(p, batch["x"], 2, ops.gelu), batch["y"])

    def pred_fn(rng, batch, p):
        return models.mlp_forward(p, batch["x"], 2, ops.gelu)

    params = models.init_mlp([d, 8, 1], seed=seed)
    return PipelineSpec(collate_fn, loss_fn, pred_fn), params, examples


def tiny_lm(dtype=np.float64):
    return char_lm.build(seq_len=8, d_model=16, n_layers=1, n_heads=2, d_ff=32, dtype=dtype)


def lm_trainer(tmp_path, name, dp=1, mp=1, per_device=8, acc=1, steps=20, seed=0, dtype=np.float64, **kw):
    ex = tiny_lm(dtype)
    dep = Deployer(n_model_shards=mp, n_devices=dp * mp, seed=seed, workdir=str(tmp_path / name))
    cfg = RunConfig(per_device_batch_size=per_device, accumulate_grad_batches=acc, learning_rate=3e-3,
                    total_steps=steps, workdir=str(tmp_path / name), seed=seed, **kw)
    return Trainer(dep, ex["spec"], ex["params"], cfg), ex


# deployer -----------------------------------------------------------------------

def test_same_seed_same_streams(tmp_path):
    a = Deployer(seed=42, workdir=str(tmp_path))
    b = Deployer(seed=42, workdir=str(tmp_path))
    assert np.array_equal(a.shuffle(100, 3), b.shuffle(100, 3))
    assert np.array_equal(a.rng("train", 5, 1).random(8), b.rng("train", 5, 1).random(8))
    assert not np.array_equal(a.shuffle(100, 0), a.shuffle(100, 1))
    assert not np.array_equal(a.rng("train", 0).random(4), a.rng("predict", 0).random(4))


def test_too_many_model_shards(tmp_path):
    with pytest.raises(MeshError, match="n_model_shards=16"):
        Deployer(n_model_shards=16, n_devices=8, workdir=str(tmp_path))


def test_deployer_plan_is_rule_plan(tmp_path):
    params = models.init_transformer(models.TransformerConfig())
    dep = Deployer(n_model_shards=2, n_devices=4, workdir=str(tmp_path))
    assert dep.dp_size == 2 and dep.mp_size == 2
    assert dep.get_sharding_rules(params).entries == plan_for(params, 2).entries


def test_lr_schedule_shape():
    lr = linear_warmup_decay(100, 1.0, 0.1)
    assert lr(0) == 0.0
    assert lr(5) == pytest.approx(0.5)
    assert lr(10) == 1.0
    assert lr(55) == pytest.approx(0.5)
    assert lr(100) == 0.0
    flat = linear_warmup_decay(10, 2.0, 0.0)
    assert flat(0) == 2.0


@given(total=st.integers(1, 500), rate=st.floats(0, 0.99), peak=st.floats(1e-5, 1.0))
def test_lr_is_bounded_and_peaks_once(total, rate, peak):
    lr = linear_warmup_decay(total, peak, rate)
    values = [lr(s) for s in range(total + 1)]
    assert all(0.0 <= v <= peak * (1 + 1e-12) for v in values)
    top = int(np.argmax(values))
    assert all(a <= b + 1e-15 for a, b in zip(values[:top], values[1:top + 1]))
    assert all(a + 1e-15 >= b for a, b in zip(values[top:], values[top + 1:]))


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(per_device_batch_size=0)
    with pytest.raises(ValueError):
        RunConfig(warmup_rate=1.0)


# checkpoint ---------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = models.init_transformer(models.TransformerConfig(), dtype=np.float32)
    dep = Deployer(n_model_shards=2, workdir=str(tmp_path))
    plan = dep.get_sharding_rules(params)
    state = TrainState(7, *[shard_params({k: v + i for k, v in params.items()}, plan, dep.mesh) for i in range(3)],
                       rng_seed=12345)
    path = save_checkpoint(state, tmp_path / "s.swck", {"train": 3, "predict": 1})
    ckpt = read_checkpoint(path)
    assert ckpt.step == 7 and ckpt.seed == 12345 and ckpt.rng_counters == {"train": 3, "predict": 1}
    back = load_checkpoint(path, plan, dep.mesh)
    for tree in ("params", "adam_m", "adam_v"):
        for k in params:
            a, b = getattr(back, tree)[k], getattr(state, tree)[k]
            assert a.partition == b.partition
            assert a.to_global().numpy().dtype == np.float32
            assert np.array_equal(a.to_global().numpy(), b.to_global().numpy())
    # loading without a plan gives replicated tensors with the same gathered values
    flat = load_checkpoint(path)
    for k, v in gather_params(state.params).items():
        assert np.array_equal(flat.params[k].to_global().numpy(), v.numpy())


def test_checkpoint_empty_and_truncated(tmp_path):
    empty = tmp_path / "e.swck"
    empty.write_bytes(b"")
    with pytest.raises(CheckpointError) as e:
        read_checkpoint(empty)
    assert e.value.offset == 0
    params = {"w": np.arange(6.0).reshape(2, 3)}
    state = TrainState.create(params, plan_for(params, 1), Deployer(workdir=str(tmp_path)).mesh)
    data = (tmp_path / "ok.swck")
    save_checkpoint(state, data)
    raw = data.read_bytes()
    assert raw.startswith(MAGIC)
    cut = tmp_path / "t.swck"
    cut.write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="offset") as e:
        read_checkpoint(cut)
    assert e.value.offset is not None and 0 < e.value.offset <= len(raw) - 5
    bad = tmp_path / "m.swck"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(bad)


def test_resume_matches_uninterrupted_run(tmp_path):
    full, ex = lm_trainer(tmp_path, "full", mp=2, steps=20)
    full_log = full.fit(ex["train"])
    part, _ = lm_trainer(tmp_path, "part", mp=2, steps=20)
    part.fit(ex["train"], max_steps=10)
    ckpt = part.save_checkpoint(tmp_path / "mid.swck")
    resumed, _ = lm_trainer(tmp_path, "resumed", mp=2, steps=20)
    rest = resumed.fit(ex["train"], resume_from=ckpt)
    assert rest.losses == full_log.losses[10:]
    for k, v in full.state.gathered().items():
        assert np.array_equal(resumed.state.gathered()[k].numpy(), v.numpy())


# trainer ---------------------------------------------------------------------------

def test_log_has_one_record_per_step_and_is_reproducible(tmp_path):
    logs = []
    for name in ("a", "b"):
        t, ex = lm_trainer(tmp_path, name, steps=12)
        t.fit(ex["train"])
        logs.append((tmp_path / name / "run.log").read_bytes())
    assert logs[0] == logs[1]
    lines = logs[0].decode().splitlines()
    steps = [ln for ln in lines if ln.startswith("step=")]
    assert len(steps) == 12
    assert steps[0].startswith("step=0 loss=") and " lr=" in steps[0]


def test_dp2_matches_dp1_at_f64(tmp_path):
    a, ex = lm_trainer(tmp_path, "dp1", dp=1, per_device=8, steps=10)
    b, _ = lm_trainer(tmp_path, "dp2", dp=2, per_device=4, steps=10)
    la, lb = a.fit(ex["train"]).losses, b.fit(ex["train"]).losses
    assert max(rel_dev(x, y) for x, y in zip(lb, la)) <= 1e-10
    for k, v in a.state.gathered().items():
        assert rel_dev(b.state.gathered()[k].numpy(), v.numpy()) <= 1e-10


def test_accumulation_matches_larger_batch(tmp_path):
    a, ex = lm_trainer(tmp_path, "big", per_device=8, acc=1, steps=20)
    b, _ = lm_trainer(tmp_path, "acc", per_device=4, acc=2, steps=20)
    la, lb = a.fit(ex["train"]).losses, b.fit(ex["train"]).losses
    assert max(rel_dev(x, y) for x, y in zip(lb, la)) <= 1e-10
    for k, v in a.state.gathered().items():
        assert rel_dev(b.state.gathered()[k].numpy(), v.numpy()) <= 1e-10


def test_collate_shape_drift_is_an_error(tmp_path):
    spec, params, examples = regression_pipeline()
    calls = {"n": 0}
    base = spec.collate_fn

    def drifting(exs):
        calls["n"] += 1
        b = base(exs)
        if calls["n"] > 1:
            b["x"] = np.concatenate([b["x"], b["x"][:, :1]], axis=1)
        return b

    spec.collate_fn = drifting
    t = Trainer(Deployer(workdir=str(tmp_path)), spec, params,
                RunConfig(per_device_batch_size=4, total_steps=3, workdir=str(tmp_path)))
    with pytest.raises(TrainingError, match="shapes changed"):
        t.fit(examples)


def test_non_finite_loss_aborts_with_step(tmp_path):
    spec, params, examples = regression_pipeline()
    spec.loss_fn = lambda rng, batch, p: ops.multiply(ops.reduce_sum(p["mlp/fc2/bias"]), np.inf)
    t = Trainer(Deployer(workdir=str(tmp_path)), spec, params,
                RunConfig(per_device_batch_size=4, total_steps=3, workdir=str(tmp_path)))
    with np.errstate(invalid="ignore"), pytest.raises(TrainingError, match="at step 0"):
        t.fit(examples)


def test_too_few_examples(tmp_path):
    spec, params, examples = regression_pipeline(n=3)
    t = Trainer(Deployer(workdir=str(tmp_path)), spec, params,
                RunConfig(per_device_batch_size=4, workdir=str(tmp_path)))
    with pytest.raises(TrainingError):
        t.fit(examples)
    with pytest.raises(TrainingError):
        t.fit([])


def test_regression_learns_and_saves_best(tmp_path):
    spec, params, examples = regression_pipeline(n=128)
    spec.metric_fn = lambda exs, preds: {"neg_mse": -float(np.mean([(p[0] - e["y"]) ** 2
                                                                     for e, p in zip(exs, preds)]))}
    cfg = RunConfig(n_epochs=4, per_device_batch_size=8, learning_rate=1e-2, workdir=str(tmp_path),
                    save_argmax_ckpt_by_metrics=["neg_mse", "eval_loss"], minimize_metrics={"eval_loss"})
    t = Trainer(Deployer(n_devices=2, workdir=str(tmp_path)), spec, params, cfg)
    log = t.fit(examples[:96], examples[96:])
    assert len(log.losses) == 4 * (96 // 16)
    assert len(log.evals) == 4
    assert log.evals[-1]["eval_loss"] < log.evals[0]["eval_loss"]
    assert set(log.best) == {"neg_mse", "eval_loss"}
    best_val, best_path = log.best["neg_mse"]
    assert best_val == max(e["neg_mse"] for e in log.evals)
    assert read_checkpoint(best_path).step > 0
    text = (tmp_path / "run.log").read_text()
    assert "epoch=3 eval_loss=" in text


# predictor -----------------------------------------------------------------------------

def test_predictor_pads_and_strips(tmp_path):
    spec, params, examples = regression_pipeline(n=10)
    dep = Deployer(workdir=str(tmp_path))
    sharded = shard_params(params, dep.get_sharding_rules(params), dep.mesh)
    seen = []

    def collate(exs):
        seen.append(len(exs))
        return spec.collate_fn(exs)

    pred = Predictor(dep, collate, spec.pred_fn)
    out = pred.predict(sharded, examples, per_device_batch_size=4)
    assert seen == [4, 4, 4] and pred.n_calls == 3
    assert len(out) == 10
    want = models.mlp_forward(params, np.stack([e["x"] for e in examples]), 2, ops.gelu).numpy()
    np.testing.assert_allclose(np.array(out), want, rtol=1e-12)


def test_predictions_independent_of_batch_size(tmp_path):
    ex = tiny_lm()
    t = Trainer(Deployer(n_model_shards=2, n_devices=2, workdir=str(tmp_path)), ex["spec"], ex["params"],
                RunConfig(total_steps=5, per_device_batch_size=8, workdir=str(tmp_path)))
    t.fit(ex["train"])
    prompts = ex["eval"][:10]
    a = t.predict(prompts, per_device_batch_size=2)
    b = t.predict(prompts, per_device_batch_size=10)
    assert a == b and len(a) == 10
    five = t.predict(prompts[:5], per_device_batch_size=3)
    assert five == a[:5]


def test_pred_fn_batch_dim_mismatch(tmp_path):
    spec, params, examples = regression_pipeline(n=4)
    dep = Deployer(workdir=str(tmp_path))
    sharded = shard_params(params, dep.get_sharding_rules(params), dep.mesh)
    pred = Predictor(dep, spec.collate_fn, lambda rng, b, p: np.zeros((1, 1)))
    with pytest.raises(PredictionError, match="batch dim"):
        pred.predict(sharded, examples, 4)
