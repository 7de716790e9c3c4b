"""First-order MAML on few-shot sinusoid regression.

The adapted parameters ``params - alpha * grad(inner_loss)`` are built from a
gradient computed on a separate tape, so the outer gradient treats them as
``params`` plus a constant.
"""
from __future__ import annotations

from functools import partial

import numpy as np

from shardwise import models, ops
from shardwise.pipeline import PipelineSpec
from shardwise.tensor import value_and_grad

N_LAYERS = 3


def make_tasks(n: int, k_shot: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(n):
        amp, phase = rng.uniform(0.1, 5.0), rng.uniform(0.0, np.pi)
        xs = rng.uniform(-5.0, 5.0, (2, k_shot, 1))
        tasks.append({"amplitude": amp, "phase": phase,
                      "train_x": xs[0], "train_y": amp * np.sin(xs[0] - phase),
                      "eval_x": xs[1], "eval_y": amp * np.sin(xs[1] - phase)})
    return tasks


def inner_loss(params, x, y):
    return ops.mse(models.mlp_forward(params, x, N_LAYERS), y)


def adapt(params, x, y, alpha: float, loss=inner_loss):
    _, grads = value_and_grad(lambda p: loss(p, x, y), params)
    return {k: ops.sub(v, ops.multiply(grads[k], alpha)) for k, v in params.items()}


def collate_fn(examples):
    return {k: np.stack([e[k] for e in examples]) for k in ("train_x", "train_y", "eval_x", "eval_y")}


def loss_fn(rng, batch, params, alpha: float):
    n = len(batch["train_x"])
    total = None
    for i in range(n):
        inner = adapt(params, batch["train_x"][i], batch["train_y"][i], alpha)
        task_loss = inner_loss(inner, batch["eval_x"][i], batch["eval_y"][i])
        total = task_loss if total is None else ops.add(total, task_loss)
    return ops.multiply(total, 1.0 / n)


def pred_fn(rng, batch, params, alpha: float):
    preds = []
    for i in range(len(batch["train_x"])):
        inner = adapt(params, batch["train_x"][i], batch["train_y"][i], alpha)
        preds.append(np.asarray(models.mlp_forward(inner, batch["eval_x"][i], N_LAYERS).numpy()))
    return np.stack(preds)


def metric_fn(examples, preds):
    post = [float(np.mean((p - e["eval_y"]) ** 2)) for e, p in zip(examples, preds)]
    return {"neg_post_adapt_mse": -float(np.mean(post))}


def adaptation_losses(params, tasks, alpha: float) -> list[tuple[float, float]]:
    """(pre-adaptation, post-adaptation) eval loss for every task."""
    out = []
    for t in tasks:
        pre = inner_loss(params, t["eval_x"], t["eval_y"]).item()
        post = inner_loss(adapt(params, t["train_x"], t["train_y"], alpha), t["eval_x"], t["eval_y"]).item()
        out.append((pre, post))
    return out


def quadratic_adaptation(theta: float = 1.0, alpha: float = 0.1) -> float:
    """One adaptation step on the toy loss theta**2; from (1.0, 0.1) this gives 0.8."""
    params = {"theta": np.array([theta])}
    square = lambda p, x, y: ops.reduce_sum(ops.multiply(p["theta"], p["theta"]))
    adapted = adapt(params, None, None, alpha, loss=square)
    return float(np.asarray(adapted["theta"].numpy())[0])


def build(k_shot: int = 10, hidden: int = 40, n_train: int = 2000, n_eval: int = 100, alpha: float = 0.01,
          dtype=np.float64, seed: int = 0):
    spec = PipelineSpec(
        collate_fn=collate_fn,
        loss_fn=partial(loss_fn, alpha=alpha),
        pred_fn=partial(pred_fn, alpha=alpha),
        metric_fn=metric_fn,
    )
    return {
        "spec": spec,
        "params": models.init_mlp([1, hidden, hidden, 1], seed=seed, dtype=dtype),
        "train": make_tasks(n_train, k_shot, seed + 1),
        "eval": make_tasks(n_eval, k_shot, seed + 2),
        "alpha": alpha,
    }
