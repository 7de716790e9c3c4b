from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence


@dataclass
class PipelineSpec:
    """The user's pipeline: three functions, two optional hooks.

    collate_fn(examples) -> dict of arrays
    loss_fn(rng, batch, params) -> scalar
    pred_fn(rng, batch, params) -> array(s) with the batch on dim 0
    output_fn(batch_preds) -> list of user values
    metric_fn(examples, predictions) -> {name: score}
    """

    collate_fn: Callable[[Sequence[Any]], Mapping[str, Any]]
    loss_fn: Callable
    pred_fn: Callable | None = None
    output_fn: Callable | None = None
    metric_fn: Callable | None = None


@dataclass
class RunConfig:
    n_epochs: int = 1
    per_device_batch_size: int = 8
    eval_per_device_batch_size: int = 8
    accumulate_grad_batches: int = 1
    learning_rate: float = 1e-3
    warmup_rate: float = 0.0
    weight_decay: float = 0.0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    workdir: str = "./workdir"
    total_steps: int | None = None
    save_argmax_ckpt_by_metrics: list[str] = field(default_factory=list)
    # metrics where lower is better, e.g. {"eval_loss"}
    minimize_metrics: set[str] = field(default_factory=set)
    eval_loss: bool = True
    save_every_epoch: bool = True

    def __post_init__(self):
        for k in ("n_epochs", "per_device_batch_size", "eval_per_device_batch_size",
                  "accumulate_grad_batches"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1, got {getattr(self, k)}")
        if self.total_steps is not None and self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 <= self.warmup_rate < 1.0:
            raise ValueError(f"warmup_rate must be in [0, 1), got {self.warmup_rate}")

    def ensure_workdir(self) -> str:
        os.makedirs(self.workdir, exist_ok=True)
        return self.workdir
