"""Training loop driving a :class:`PipelineSpec` on the deployer's mesh."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from shardwise.mesh import ShardedTensor
from shardwise.partition import Replicated
from shardwise.pipeline.checkpoint import read_checkpoint, save_checkpoint, state_from_checkpoint
from shardwise.pipeline.config import PipelineSpec, RunConfig
from shardwise.pipeline.deployer import Deployer
from shardwise.pipeline.predictor import Predictor, pad_examples
from shardwise.shardplan import ShardingPlan
from shardwise.spmd import TrainState, adamw_step, dp_sync_grads, replica_forward_backward, split_batch
from shardwise.tensor import Tensor


class TrainingError(RuntimeError):
    pass


@dataclass
class RunLog:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    evals: list[dict[str, float]] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    best: dict[str, tuple[float, str]] = field(default_factory=dict)


def fmt(x: float) -> str:
    return repr(float(x))


def _add_grads(acc, new):
    if acc is None:
        return dict(new)
    out = {}
    for name, st in acc.items():
        shards = [Tensor._wrap(a.data + b.data) for a, b in zip(st.shards, new[name].shards)]
        if isinstance(st.partition, Replicated):
            shards = [shards[0]] * len(shards)
        out[name] = ShardedTensor(st.global_shape, st.partition, shards)
    return out


def _scale_grads(grads, factor: float):
    if factor == 1.0:
        return grads
    out = {}
    for name, st in grads.items():
        shards = [Tensor._wrap(s.data * factor) for s in st.shards]
        if isinstance(st.partition, Replicated):
            shards = [shards[0]] * len(shards)
        out[name] = ShardedTensor(st.global_shape, st.partition, shards)
    return out


class Trainer:
    def __init__(self, deployer: Deployer, spec: PipelineSpec, params: Mapping[str, Any],
                 config: RunConfig, plan: ShardingPlan | None = None):
        self.deployer = deployer
        self.spec = spec
        self.config = config
        self.plan = plan if plan is not None else deployer.get_sharding_rules(params)
        self.state = TrainState.create(params, self.plan, deployer.mesh, rng_seed=deployer.seed)
        self.rng_counters = {"train": 0, "predict": 0}
        self._batch_shapes: dict[int, dict[str, tuple]] = {}
        config.ensure_workdir()

    # batches -------------------------------------------------------------------

    @property
    def global_batch_size(self) -> int:
        return self.config.per_device_batch_size * self.deployer.dp_size

    def collate(self, examples: Sequence[Any]) -> dict[str, np.ndarray]:
        batch = {k: np.asarray(v.numpy() if hasattr(v, "numpy") else v)
                 for k, v in self.spec.collate_fn(list(examples)).items()}
        shapes = {k: v.shape for k, v in batch.items()}
        seen = self._batch_shapes.setdefault(len(examples), shapes)
        if seen != shapes:
            raise TrainingError(f"collate_fn output shapes changed for equal-size batches: "
                                f"{seen} then {shapes}")
        return batch

    def steps_per_epoch(self, n_examples: int) -> int:
        spe = self.deployer.steps_per_epoch(n_examples, self.config.per_device_batch_size,
                                            self.config.accumulate_grad_batches)
        if spe < 1:
            raise TrainingError(f"{n_examples} examples are fewer than one optimizer step needs "
                                f"({self.global_batch_size} x {self.config.accumulate_grad_batches})")
        return spe

    def total_steps(self, n_examples: int) -> int:
        if self.config.total_steps is not None:
            return self.config.total_steps
        return self.config.n_epochs * self.steps_per_epoch(n_examples)

    def micro_batches(self, examples: Sequence[Any], step: int):
        """Examples for every micro-batch of optimizer step ``step`` (drop-last)."""
        spe = self.steps_per_epoch(len(examples))
        epoch, pos = divmod(step, spe)
        perm = self.deployer.shuffle(len(examples), epoch)
        gb, acc = self.global_batch_size, self.config.accumulate_grad_batches
        for j in range(acc):
            start = (pos * acc + j) * gb
            yield [examples[i] for i in perm[start:start + gb]]

    # steps -----------------------------------------------------------------------

    def forward_backward(self, batch, micro_index: int):
        mesh = self.deployer.mesh
        parts = split_batch(batch, mesh.dp_size)
        losses, grads = [], []
        for r, part in enumerate(parts):
            rng = self.deployer.rng("train", micro_index, r)
            loss, g = replica_forward_backward(self.spec.loss_fn, self.state.params, part, mesh, r, rng)
            losses.append(loss)
            grads.append(g)
        return losses, grads

    def train_step(self, examples: Sequence[Any], lr: float) -> float:
        """One optimizer update over ``accumulate_grad_batches`` micro-batches."""
        step = self.state.step
        acc = self.config.accumulate_grad_batches
        acc_grads = [None] * self.deployer.dp_size
        total = 0.0
        for micro in self.micro_batches(examples, step):
            losses, grads = self.forward_backward(self.collate(micro), self.rng_counters["train"])
            self.rng_counters["train"] += 1
            for v in losses:
                if not math.isfinite(v):
                    raise TrainingError(f"non-finite loss {v} at step {step}")
                total += v
            acc_grads = [_add_grads(a, g) for a, g in zip(acc_grads, grads)]
        acc_grads = [_scale_grads(g, 1.0 / acc) for g in acc_grads]
        synced = dp_sync_grads(acc_grads, self.deployer.mesh)[0]
        c = self.config
        self.state = adamw_step(self.state, synced, lr, c.adam_b1, c.adam_b2, c.adam_eps, c.weight_decay)
        return total / (acc * self.deployer.dp_size)

    # evaluation --------------------------------------------------------------------

    def eval_loss(self, examples: Sequence[Any]) -> float:
        """Mean loss over ``examples``; the last batch is padded and weighted by its real size."""
        gb = self.config.eval_per_device_batch_size * self.deployer.dp_size
        padded, _ = pad_examples(examples, gb)
        total, count = 0.0, 0
        for start in range(0, len(padded), gb):
            real = min(gb, len(examples) - start)
            losses, _ = self._eval_forward(self.collate(padded[start:start + gb]))
            total += real * (sum(losses) / len(losses))
            count += real
        return total / count

    def _eval_forward(self, batch):
        from shardwise.spmd import sharded_call
        mesh = self.deployer.mesh
        losses = []
        for r, part in enumerate(split_batch(batch, mesh.dp_size)):
            out = sharded_call(lambda p: self.spec.loss_fn(None, part, p), self.state.params, mesh, r)
            losses.append(float(np.asarray(out.numpy()).reshape(())))
        return losses, None

    def get_default_predictor(self, pred_fn=None, output_fn=None) -> Predictor:
        return Predictor(self.deployer, self.collate_fn_unchecked, pred_fn or self.spec.pred_fn,
                         output_fn or self.spec.output_fn)

    def collate_fn_unchecked(self, examples):
        return self.spec.collate_fn(list(examples))

    def predict(self, examples: Sequence[Any], per_device_batch_size: int | None = None) -> list:
        if self.spec.pred_fn is None:
            raise TrainingError("pipeline has no pred_fn")
        p = self.get_default_predictor()
        p.n_calls = self.rng_counters["predict"]
        out = p.predict(self.state.params, examples,
                        per_device_batch_size or self.config.eval_per_device_batch_size)
        self.rng_counters["predict"] = p.n_calls
        return out

    def evaluate(self, examples: Sequence[Any]) -> dict[str, float]:
        result: dict[str, float] = {}
        if self.config.eval_loss:
            result["eval_loss"] = self.eval_loss(examples)
        if self.spec.metric_fn is not None and self.spec.pred_fn is not None:
            preds = self.predict(examples)
            result.update({k: float(v) for k, v in self.spec.metric_fn(examples, preds).items()})
        return result

    # checkpoints ---------------------------------------------------------------------

    def save_checkpoint(self, path) -> str:
        return save_checkpoint(self.state, path, self.rng_counters)

    def load_checkpoint(self, path) -> None:
        ckpt = read_checkpoint(path)
        self.state = state_from_checkpoint(ckpt, self.plan, self.deployer.mesh)
        self.rng_counters.update(ckpt.rng_counters)

    def _better(self, metric: str, new: float, old: float) -> bool:
        if metric in self.config.minimize_metrics:
            return new < old
        return new > old

    # loop -----------------------------------------------------------------------------

    def fit(self, train_examples: Sequence[Any], eval_examples: Sequence[Any] | None = None,
            max_steps: int | None = None, resume_from: str | None = None) -> RunLog:
        """Train until the configured step budget, or stop early after ``max_steps`` updates."""
        if not train_examples:
            raise TrainingError("no training examples")
        if resume_from is not None:
            self.load_checkpoint(resume_from)
        elif self.state.step == 0:
            self.deployer.reset_log()
        total = self.total_steps(len(train_examples))
        spe = self.steps_per_epoch(len(train_examples))
        schedule = self.deployer.get_lr_schedule(total, self.config.learning_rate, self.config.warmup_rate)
        ckpt_dir = os.path.join(self.config.workdir, "ckpt")
        os.makedirs(ckpt_dir, exist_ok=True)
        log = RunLog()
        stop = total if max_steps is None else min(total, self.state.step + max_steps)
        while self.state.step < stop:
            step = self.state.step
            lr = schedule(step)
            loss = self.train_step(train_examples, lr)
            log.losses.append(loss)
            log.lrs.append(lr)
            self.deployer.log_line(f"step={step} loss={fmt(loss)} lr={fmt(lr)}")
            done = self.state.step
            if done % spe == 0 or done == total:
                epoch = (done - 1) // spe
                self._end_epoch(epoch, eval_examples, ckpt_dir, log)
        return log

    def _end_epoch(self, epoch: int, eval_examples, ckpt_dir: str, log: RunLog) -> None:
        metrics = self.evaluate(eval_examples) if eval_examples else {}
        if metrics:
            log.evals.append({"epoch": epoch, **metrics})
            self.deployer.log_line(f"epoch={epoch} " + " ".join(f"{k}={fmt(v)}" for k, v in metrics.items()))
        if self.config.save_every_epoch:
            log.checkpoints.append(self.save_checkpoint(os.path.join(ckpt_dir, "last.swck")))
        for metric in self.config.save_argmax_ckpt_by_metrics:
            if metric not in metrics:
                continue
            best = log.best.get(metric)
            if best is None or self._better(metric, metrics[metric], best[0]):
                path = self.save_checkpoint(os.path.join(ckpt_dir, f"best_{metric}.swck"))
                log.best[metric] = (metrics[metric], path)
