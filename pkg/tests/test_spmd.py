import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardwise import models, ops
from shardwise.audit import make_batch, rel_dev
from shardwise.mesh import ShardedTensor, build_mesh
from shardwise.partition import REPLICATED, Split
from shardwise.shardplan import ShardingPlan, plan_for
from shardwise.spmd import (
    DistTensor,
    GroupContext,
    PartitionError,
    TrainState,
    adamw_step,
    adamw_update,
    column_parallel_linear,
    dp_sync_grads,
    expected_per_device_elements,
    gather_params,
    reference_forward_backward,
    row_parallel_linear,
    shard_params,
    sharded_call,
    spmd_forward_backward,
    to_replicated,
)
from shardwise.tensor import NonFiniteError, Tensor, checked

CFG = models.TransformerConfig(vocab_size=16, n_layers=1, d_model=16, n_heads=4, d_ff=32, max_len=8)


def lm_loss_fn(cfg):
    def loss_fn(rng, batch, p):
        return models.lm_loss(p, batch, cfg)
    return loss_fn


def mlp_params(rng, d=8, h=16):
    return {"mlp/fc1/kernel": rng.standard_normal((h, d)), "mlp/fc1/bias": rng.standard_normal(h),
            "mlp/fc2/kernel": rng.standard_normal((d, h)), "mlp/fc2/bias": rng.standard_normal(d)}


# shard / gather ---------------------------------------------------------------------

def test_split0_kernel_two_shards(rng):
    w = rng.standard_normal((4, 6))
    mesh = build_mesh(1, 2, 1, 2)
    sharded = shard_params({"w": w, "b": np.arange(6.0)}, ShardingPlan({"w": Split(0), "b": REPLICATED}, 2), mesh)
    assert [s.shape for s in sharded["w"].shards] == [(2, 6), (2, 6)]
    np.testing.assert_array_equal(np.concatenate([s.data for s in sharded["w"].shards]), w)
    b0, b1 = sharded["b"].shards
    np.testing.assert_array_equal(b0.data, b1.data)


@pytest.mark.parametrize("mp", [1, 2, 4])
def test_transformer_round_trips_bit_exactly(mp):
    params = models.init_transformer(CFG)
    back = gather_params(shard_params(params, plan_for(params, mp), build_mesh(1, mp, 1, mp)))
    assert set(back) == set(params)
    for k in params:
        assert np.array_equal(back[k].numpy(), params[k])


def test_shard_params_plan_mismatch():
    mesh = build_mesh(1, 2, 1, 2)
    with pytest.raises(PartitionError, match="missing"):
        shard_params({"w": np.ones((2, 2))}, ShardingPlan({}, 2), mesh)
    with pytest.raises(PartitionError, match="cannot apply"):
        shard_params({"w": np.ones((3, 2))}, ShardingPlan({"w": Split(0)}, 2), mesh)


# parallel linear --------------------------------------------------------------------

def _dist(mesh, value, part):
    ctx = GroupContext(mesh, mesh.mp_group(0))
    st_ = ShardedTensor.from_global(value, part, ctx.n)
    return DistTensor(ctx, list(st_.shards), part, st_.global_shape)


@pytest.mark.parametrize("mp", [1, 2, 4])
def test_column_then_row_matches_mlp(rng, mp):
    p = mlp_params(rng)
    x = rng.standard_normal((5, 8))
    mesh = build_mesh(1, mp, 1, mp)
    xd = _dist(mesh, x, REPLICATED)
    h = column_parallel_linear(xd, _dist(mesh, p["mlp/fc1/kernel"], Split(0)),
                               _dist(mesh, p["mlp/fc1/bias"], Split(0)))
    assert h.partition == Split(1)
    assert mesh.comm_report().total_count == 0
    h = ops.gelu(h)
    y = row_parallel_linear(h, _dist(mesh, p["mlp/fc2/kernel"], Split(1)), _dist(mesh, p["mlp/fc2/bias"], REPLICATED))
    assert y.partition == REPLICATED
    want = ops.linear(ops.gelu(ops.linear(x, p["mlp/fc1/kernel"], p["mlp/fc1/bias"])),
                      p["mlp/fc2/kernel"], p["mlp/fc2/bias"]).numpy()
    assert rel_dev(y.numpy(), want) <= 1e-12
    rep = mesh.comm_report()
    if mp == 1:
        assert rep.total_count == 0 and rep.total_payload_bytes == 0
    else:
        assert rep["all_reduce"].count == 1 and rep.total_count == 1


def test_row_parallel_rejects_replicated_input(rng):
    mesh = build_mesh(1, 2, 1, 2)
    x = _dist(mesh, rng.standard_normal((3, 4)), REPLICATED)
    with pytest.raises(PartitionError) as e:
        row_parallel_linear(x, _dist(mesh, rng.standard_normal((4, 4)), Split(1)))
    assert "expected input split:1" in str(e.value) and "replicated" in str(e.value)
    with pytest.raises(PartitionError, match="expected split:0 kernel"):
        column_parallel_linear(x, _dist(mesh, rng.standard_normal((4, 4)), Split(1)))


@pytest.mark.parametrize("mp", [2, 4])
def test_unmodified_mlp_code_emits_one_all_reduce(rng, mp):
    p = mlp_params(rng, h=16)
    x = rng.standard_normal((3, 8))
    mesh = build_mesh(1, mp, 1, mp)
    y = sharded_call(lambda q: models.mlp_forward(q, x, 2, ops.gelu), shard_params(p, plan_for(p, mp), mesh), mesh)
    assert rel_dev(to_replicated(y).numpy(), models.mlp_forward(p, x, 2, ops.gelu).numpy()) <= 1e-12
    assert mesh.comm_report()["all_reduce"].count == 1


# forward / backward -------------------------------------------------------------------

@pytest.mark.parametrize("mp", [1, 2, 4])
def test_loss_and_grads_match_reference(mp):
    params = models.init_transformer(CFG)
    batch = make_batch(CFG, 2, 8, seed=3)
    fn = lm_loss_fn(CFG)
    ref_loss, ref_grads = reference_forward_backward(fn, params, batch)
    mesh = build_mesh(1, mp, 1, mp)
    plan = plan_for(params, mp)
    loss, grads = spmd_forward_backward(fn, TrainState.create(params, plan, mesh), batch, mesh)
    assert rel_dev(loss, ref_loss) <= 1e-10
    for k in params:
        assert grads[k].partition == plan[k]
        assert rel_dev(grads[k].to_global().numpy(), ref_grads[k].numpy()) <= 1e-10, k
    if mp == 2:
        assert grads["block_0/mlp/fc1/kernel"].partition == Split(0)
        assert grads["block_0/mlp/fc2/kernel"].partition == Split(1)


def test_zero_inputs_and_zero_head_give_log_vocab():
    params = models.init_transformer(CFG)
    params["lm_head/kernel"] = np.zeros_like(params["lm_head/kernel"])
    batch = {"input_ids": np.zeros((2, 4), np.int64), "labels": np.zeros((2, 4), np.int64),
             "label_weights": np.ones((2, 4))}
    mesh = build_mesh(1, 2, 1, 2)
    loss, _ = spmd_forward_backward(lm_loss_fn(CFG), TrainState.create(params, plan_for(params, 2), mesh),
                                    batch, mesh)
    assert loss == pytest.approx(math.log(CFG.vocab_size), abs=1e-12)


def test_non_scalar_loss_rejected():
    params = {"w": np.ones((2, 2))}
    mesh = build_mesh(1, 2, 1, 2)
    state = TrainState.create(params, ShardingPlan({"w": Split(0)}, 2), mesh)
    with pytest.raises(Exception, match="scalar"):
        spmd_forward_backward(lambda rng, b, p: ops.multiply(p["w"], 2.0), state, {"x": np.ones((2, 1))}, mesh)


def test_collective_multiset_is_deterministic():
    params = models.init_transformer(CFG)
    batch = make_batch(CFG, 4, 8, seed=0)

    def run():
        mesh = build_mesh(1, 4, 2, 2)
        spmd_forward_backward(lm_loss_fn(CFG), TrainState.create(params, plan_for(params, 2), mesh), batch, mesh)
        return [(e.kind, e.payload_bytes, e.group) for e in mesh.events]

    assert run() == run()


# data parallel ------------------------------------------------------------------------

def test_dp_sync_mean_of_g_and_3g():
    mesh = build_mesh(1, 2, 2, 1)
    g = np.array([1.0, -2.0])
    grads = [{"w": ShardedTensor.from_global(g * s, REPLICATED, 1)} for s in (1, 3)]
    out = dp_sync_grads(grads, mesh)
    for r in out:
        np.testing.assert_array_equal(r["w"].to_global().numpy(), 2 * g)
    assert mesh.comm_report()["all_reduce"].count == 1


def test_dp1_is_noop():
    mesh = build_mesh(1, 1, 1, 1)
    g = {"w": ShardedTensor.from_global(np.ones(3), REPLICATED, 1)}
    (out,) = dp_sync_grads([g], mesh)
    assert out["w"] is g["w"]
    assert mesh.comm_report().total_payload_bytes == 0


@pytest.mark.parametrize("mp", [1, 2])
def test_dp2_equals_full_batch(mp):
    params = models.init_transformer(CFG)
    batch = make_batch(CFG, 4, 8, seed=5)
    fn = lm_loss_fn(CFG)
    ref_loss, ref_grads = reference_forward_backward(fn, params, batch)
    mesh = build_mesh(1, 2 * mp, 2, mp)
    loss, grads = spmd_forward_backward(fn, TrainState.create(params, plan_for(params, mp), mesh), batch, mesh)
    assert rel_dev(loss, ref_loss) <= 1e-12
    for k in params:
        assert rel_dev(grads[k].to_global().numpy(), ref_grads[k].numpy()) <= 1e-12, k


# optimizer -----------------------------------------------------------------------

def test_adamw_hand_example():
    p, m, v = adamw_update(np.array(1.0), np.array(1.0), np.array(0.0), np.array(0.0), 1, 0.1)
    assert m == pytest.approx(0.1, abs=1e-15)
    assert v == pytest.approx(0.001, abs=1e-15)
    assert p == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert p == pytest.approx(0.9, abs=1e-8)


def test_zero_grad_without_decay_leaves_params():
    params = models.init_transformer(CFG)
    mesh = build_mesh(1, 2, 1, 2)
    state = TrainState.create(params, plan_for(params, 2), mesh)
    zeros = {k: ShardedTensor(s.global_shape, s.partition, [Tensor(np.zeros_like(t.data)) for t in s.shards])
             for k, s in state.params.items()}
    new = adamw_step(state, zeros, 0.1)
    assert new.step == 1
    for k in params:
        assert np.array_equal(new.gathered()[k].numpy(), params[k])
        assert new.adam_m[k].partition == new.params[k].partition == new.adam_v[k].partition


def test_sharded_adamw_equals_unsharded(rng):
    params = models.init_transformer(CFG)
    mesh = build_mesh(1, 4, 1, 4)
    plan = plan_for(params, 4)
    state = TrainState.create(params, plan, mesh)
    grads = {k: rng.standard_normal(v.shape) for k, v in params.items()}
    sg = {k: ShardedTensor.from_global(g, plan[k], 4) for k, g in grads.items()}
    new = adamw_step(state, sg, 1e-2, weight_decay=0.1)
    assert mesh.comm_report().total_count == 0
    for k in params:
        want, _, _ = adamw_update(params[k], grads[k], np.zeros_like(params[k]), np.zeros_like(params[k]), 1,
                                  1e-2, weight_decay=0.1)
        assert rel_dev(new.gathered()[k].numpy(), want) <= 1e-12


def test_adamw_checked_mode_rejects_nan():
    mesh = build_mesh(1, 1, 1, 1)
    state = TrainState.create({"w": np.ones(2)}, ShardingPlan({"w": REPLICATED}, 1), mesh)
    bad = {"w": ShardedTensor.from_global(np.array([np.nan, 0.0]), REPLICATED, 1)}
    with checked(), pytest.raises(NonFiniteError):
        adamw_step(state, bad, 0.1)


def test_gradient_partition_mismatch():
    mesh = build_mesh(1, 2, 1, 2)
    state = TrainState.create({"w": np.ones((2, 2))}, ShardingPlan({"w": Split(0)}, 2), mesh)
    with pytest.raises(PartitionError, match="partition"):
        adamw_step(state, {"w": ShardedTensor.from_global(np.ones((2, 2)), Split(1), 2)}, 0.1)


# memory -------------------------------------------------------------------------

@pytest.mark.parametrize("mp", [1, 2, 4])
def test_per_device_elements_match_formula(mp):
    params = models.init_transformer(CFG)
    plan = plan_for(params, mp)
    state = TrainState.create(params, plan, build_mesh(1, mp, 1, mp))
    rep = sum(params[k].size for k, p in plan.items() if p == REPLICATED)
    split = sum(params[k].size for k, p in plan.items() if p != REPLICATED)
    assert state.per_device_elements() == [3 * (rep + split // mp)] * mp
    assert expected_per_device_elements(plan, params, mp) == 3 * (rep + split // mp)


@settings(max_examples=15)
@given(dp=st.sampled_from([1, 2]), mp=st.sampled_from([1, 2, 4]), seed=st.integers(0, 1000))
def test_two_steps_match_reference(dp, mp, seed):
    cfg = models.TransformerConfig(vocab_size=8, n_layers=1, d_model=8, n_heads=2, d_ff=16, max_len=4)
    params = models.init_transformer(cfg, seed=seed)
    fn = lm_loss_fn(cfg)
    mesh = build_mesh(1, dp * mp, dp, mp)
    state = TrainState.create(params, plan_for(params, mp), mesh)
    ref = dict(params)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(x) for k, x in params.items()}
    for step in range(2):
        batch = make_batch(cfg, 2 * dp, 4, seed + step)
        _, g = reference_forward_backward(fn, ref, batch)
        for k in ref:
            ref[k], m[k], v[k] = adamw_update(ref[k], g[k].numpy(), m[k], v[k], step + 1, 1e-2)
        _, sg = spmd_forward_backward(fn, state, batch, mesh)
        state = adamw_step(state, sg, 1e-2)
    for k in params:
        assert rel_dev(state.gathered()[k].numpy(), ref[k]) <= 1e-10
