"""Mesh setup, plan derivation, randomness and logging for a pipeline."""
from __future__ import annotations

import logging
import os
from typing import Callable, Mapping

import numpy as np

from shardwise.mesh import DeviceMesh, MeshError, build_mesh
from shardwise.shardplan import ParamRole, ShardingPlan, plan_for

STREAMS = {"train": 0, "predict": 1, "shuffle": 2, "init": 3}


def linear_warmup_decay(total_steps: int, learning_rate: float, warmup_rate: float) -> Callable[[int], float]:
    """Linear ramp 0 -> peak over ``warmup_rate * total_steps`` updates, then linear decay to 0."""
    warmup = int(warmup_rate * total_steps)
    decay = max(total_steps - warmup, 1)

    def lr(step: int) -> float:
        if step < warmup:
            return learning_rate * step / warmup
        return learning_rate * max(0.0, 1.0 - (step - warmup) / decay)

    return lr


class Deployer:
    """Owns the device mesh and everything a pipeline should not care about.

    ``n_model_shards`` sets the model-parallel degree; the remaining devices
    form the data-parallel axis.
    """

    def __init__(self, n_model_shards: int = 1, n_devices: int | None = None, n_hosts: int = 1,
                 seed: int = 42, workdir: str = "./workdir", verbose: bool = False,
                 log_name: str = "run.log"):
        n_devices = n_model_shards if n_devices is None else n_devices
        if n_devices < 1 or n_hosts < 1 or n_devices % n_hosts:
            raise MeshError(f"inconsistent mesh: n_devices={n_devices}, n_hosts={n_hosts}")
        if n_model_shards < 1 or n_model_shards > n_devices or n_devices % n_model_shards:
            raise MeshError(f"n_model_shards={n_model_shards} does not fit a {n_devices}-device mesh")
        self.mesh: DeviceMesh = build_mesh(n_hosts, n_devices // n_hosts,
                                           n_devices // n_model_shards, n_model_shards)
        self.n_model_shards = n_model_shards
        self.seed = int(seed)
        self.workdir = workdir
        os.makedirs(workdir, exist_ok=True)
        self.log_path = os.path.join(workdir, log_name)
        self.logger = logging.getLogger(f"shardwise.run.{id(self)}")
        self.logger.setLevel(logging.INFO if verbose else logging.WARNING)

    @property
    def dp_size(self) -> int:
        return self.mesh.dp_size

    @property
    def mp_size(self) -> int:
        return self.mesh.mp_size

    def get_sharding_rules(self, params: Mapping, overrides: Mapping[str, ParamRole | str] | None = None
                           ) -> ShardingPlan:
        return plan_for(params, self.n_model_shards, overrides)

    def rng(self, stream: str, index: int = 0, *sub: int) -> np.random.Generator:
        """Generator for ``(seed, stream, index, *sub)``; position is fully determined by the key."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(STREAMS[stream], int(index), *map(int, sub)))
        return np.random.Generator(np.random.PCG64(ss))

    def shuffle(self, n: int, epoch: int) -> np.ndarray:
        return self.rng("shuffle", epoch).permutation(n)

    def get_lr_schedule(self, total_steps: int, learning_rate: float, warmup_rate: float):
        return linear_warmup_decay(total_steps, learning_rate, warmup_rate)

    def steps_per_epoch(self, n_examples: int, per_device_batch_size: int,
                        accumulate_grad_batches: int = 1) -> int:
        return n_examples // (per_device_batch_size * self.dp_size) // accumulate_grad_batches

    def log_line(self, line: str) -> None:
        with open(self.log_path, "a") as f:
            f.write(line + "\n")
        self.logger.info(line)

    def reset_log(self) -> None:
        open(self.log_path, "w").close()
