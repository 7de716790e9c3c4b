"""Sharded-versus-reference equivalence audit.

Runs the same loss function twice, once on plain tensors and once sharded on
a (dp, mp) mesh, and compares the loss, every gradient and the parameters
after a few AdamW steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from shardwise import models, ops
from shardwise.mesh import CommReport, build_mesh
from shardwise.shardplan import ParamRole, ShardingPlan, plan_for, same_dim_plan
from shardwise.spmd import (
    TrainState,
    adamw_step,
    adamw_update,
    reference_forward_backward,
    shard_params,
    sharded_call,
    spmd_forward_backward,
    to_replicated,
)

TOLERANCE = {"f64": 1e-10, "f32": 1e-4}
DTYPES = {"f64": np.float64, "f32": np.float32}


def rel_dev(a, b) -> float:
    """max|a - b| / max|b|, with the denominator floored at the smallest normal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b), initial=0.0)), np.finfo(np.float64).tiny)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def worst(devs: Mapping[str, float]) -> tuple[str, float]:
    name = max(devs, key=lambda k: devs[k])
    return name, devs[name]


@dataclass
class AuditResult:
    dtype: str
    mp: int
    dp: int
    steps: int
    loss_dev: float
    grad_devs: dict[str, float]
    param_devs: dict[str, float]
    report: CommReport
    tolerance: float
    baseline_report: CommReport | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def max_dev(self) -> float:
        return max(self.loss_dev, max(self.grad_devs.values()), max(self.param_devs.values()))

    @property
    def passed(self) -> bool:
        return self.max_dev <= self.tolerance

    def summary_lines(self) -> list[str]:
        g_name, g = worst(self.grad_devs)
        p_name, p = worst(self.param_devs)
        lines = [
            f"mesh dp={self.dp} mp={self.mp} dtype={self.dtype} steps={self.steps} tolerance={self.tolerance:g}",
            f"loss max_rel_dev={self.loss_dev:.3e}",
            f"grad max_rel_dev={g:.3e} worst={g_name}",
            f"param max_rel_dev={p:.3e} worst={p_name}",
            f"collective payload_bytes={self.report.total_payload_bytes} "
            f"wire_bytes={self.report.total_wire_bytes}",
        ]
        if self.baseline_report is not None:
            lines.append(f"baseline same-dim payload_bytes={self.baseline_report.total_payload_bytes} "
                         f"wire_bytes={self.baseline_report.total_wire_bytes}")
        lines.append("PASS" if self.passed else "FAIL")
        return lines


def make_batch(cfg: models.TransformerConfig, batch_size: int, seq_len: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, cfg.vocab_size, (batch_size, seq_len + 1))
    return {"input_ids": ids[:, :-1], "labels": ids[:, 1:], "label_weights": np.ones((batch_size, seq_len))}


def _sharded_step_traffic(loss_fn, params, plan: ShardingPlan, mesh, batch) -> CommReport:
    state = TrainState.create(params, plan, mesh)
    mesh.reset()
    spmd_forward_backward(loss_fn, state, batch, mesh)
    return mesh.comm_report()


def run_audit(cfg: models.TransformerConfig, mp: int = 2, dp: int = 1, dtype: str = "f64", steps: int = 10,
              plan: ShardingPlan | None = None, overrides: Mapping[str, ParamRole] | None = None,
              baseline: str | None = None, per_replica_batch: int = 2, seq_len: int = 8,
              lr: float = 1e-3, weight_decay: float = 0.01, seed: int = 0) -> AuditResult:
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    seq_len = min(seq_len, cfg.max_len)
    params = models.init_transformer(cfg, seed=seed, dtype=DTYPES[dtype])
    if plan is None:
        plan = plan_for(params, mp, overrides)
    elif plan.n_shards != mp:
        raise ValueError(f"plan was derived for {plan.n_shards} shards but --mp is {mp}")
    mesh = build_mesh(1, mp * dp, dp, mp)
    global_batch = per_replica_batch * dp

    def loss_fn(rng, batch, p):
        return models.lm_loss(p, batch, cfg)

    batches = [make_batch(cfg, global_batch, seq_len, seed + 1 + k) for k in range(max(steps, 1))]

    ref_loss, ref_grads = reference_forward_backward(loss_fn, params, batches[0])
    state = TrainState.create(params, plan, mesh)
    mesh.reset()
    loss, grads = spmd_forward_backward(loss_fn, state, batches[0], mesh)
    report = mesh.comm_report()
    grad_devs = {k: rel_dev(grads[k].to_global().numpy(), ref_grads[k].numpy()) for k in params}

    ref = {k: np.array(v) for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in ref.items()}
    v = {k: np.zeros_like(x) for k, x in ref.items()}
    for k in range(steps):
        _, g = reference_forward_backward(loss_fn, ref, batches[k])
        for name in ref:
            ref[name], m[name], v[name] = adamw_update(ref[name], g[name].numpy(), m[name], v[name], k + 1,
                                                       lr, weight_decay=weight_decay)
        _, sg = spmd_forward_backward(loss_fn, state, batches[k], mesh)
        state = adamw_step(state, sg, lr, weight_decay=weight_decay)
    final = state.gathered()
    param_devs = {k: rel_dev(final[k].numpy(), ref[k]) for k in params}

    base = None
    if baseline == "same-dim":
        base_mesh = build_mesh(1, mp * dp, dp, mp)
        base = _sharded_step_traffic(loss_fn, params, same_dim_plan(params, mp), base_mesh, batches[0])
    elif baseline is not None:
        raise ValueError(f"unknown baseline {baseline!r}")
    return AuditResult(dtype, mp, dp, steps, rel_dev(loss, ref_loss), grad_devs, param_devs, report,
                       TOLERANCE[dtype], base)


def mlp_forward_traffic(hidden: int, n_shards: int, baseline: bool = False, d_model: int = 16,
                        batch: int = 8, dtype=np.float32, seed: int = 0) -> tuple[CommReport, np.ndarray]:
    """Collectives for one forward pass of a d_model -> hidden -> d_model MLP.

    The output is brought to a replicated value, as the next layer consumes it.
    ``baseline`` uses the plan that splits both kernels along dim 0.
    """
    params = models.init_mlp([d_model, hidden, d_model], seed=seed, dtype=dtype)
    plan = same_dim_plan(params, n_shards) if baseline else plan_for(params, n_shards)
    mesh = build_mesh(1, n_shards, 1, n_shards)
    x = np.random.default_rng(seed + 1).standard_normal((batch, d_model)).astype(dtype)
    out = sharded_call(lambda p: models.mlp_forward(p, x, 2, ops.gelu), shard_params(params, plan, mesh), mesh)
    out = to_replicated(out).numpy()
    return mesh.comm_report(), out
