"""Binary checkpoint files.

Layout (little-endian)::

    b"SWCK" | version u32 | step u64
    rng block: seed u64 | n_streams u32 | n_streams × (name_len u32, name, counter u64)
    records until EOF: name_len u32 | name | dtype u8 | rank u32 | dims u64×rank | payload

Tensors are stored gathered (global shape); ``params/``, ``adam_m/`` and
``adam_v/`` prefixes separate the three trees.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from shardwise.mesh import DeviceMesh, ShardedTensor, single_host_mesh
from shardwise.partition import REPLICATED
from shardwise.shardplan import ShardingPlan
from shardwise.spmd import TrainState
from shardwise.tensor import Tensor

MAGIC = b"SWCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
TREES = ("params", "adam_m", "adam_v")


class CheckpointError(ValueError):
    def __init__(self, msg: str, offset: int | None = None):
        self.offset = offset
        super().__init__(f"{msg} (at byte offset {offset})" if offset is not None else msg)


@dataclass
class Checkpoint:
    step: int
    seed: int
    rng_counters: dict[str, int]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def tree(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def encode(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<IQ", VERSION, ckpt.step)]
    out.append(struct.pack("<QI", ckpt.seed & (2 ** 64 - 1), len(ckpt.rng_counters)))
    for name, counter in ckpt.rng_counters.items():
        b = name.encode()
        out.append(struct.pack("<I", len(b)) + b + struct.pack("<Q", counter))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        b = name.encode()
        out.append(struct.pack("<I", len(b)) + b)
        out.append(struct.pack("<BI", _CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}: need {n} bytes, "
                                  f"{len(self.data) - self.pos} left", self.pos)
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if not data:
        raise CheckpointError("empty checkpoint file", 0)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", 0)
    version, step = r.unpack("<IQ", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    seed, n_streams = r.unpack("<QI", "rng block")
    counters = {}
    for _ in range(n_streams):
        (n,) = r.unpack("<I", "rng stream name length")
        name = r.take(n, "rng stream name").decode()
        (counters[name],) = r.unpack("<Q", "rng counter")
    tensors = {}
    while r.pos < len(data):
        start = r.pos
        (n,) = r.unpack("<I", "record name length")
        try:
            name = r.take(n, "record name").decode()
        except UnicodeDecodeError:
            raise CheckpointError("corrupt record name", start) from None
        code, rank = r.unpack("<BI", f"record header of {name}")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}", r.pos - 5)
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        dt = _DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        payload = r.take(count * dt.itemsize, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return Checkpoint(step, seed, counters, tensors)


def save_checkpoint(state: TrainState, path, rng_counters: Mapping[str, int] | None = None) -> str:
    """Write ``state`` gathered to global tensors; atomic via rename."""
    tensors = {}
    for tree in TREES:
        for name, st in getattr(state, tree).items():
            tensors[f"{tree}/{name}"] = st.to_global().data
    ckpt = Checkpoint(state.step, state.rng_seed, dict(rng_counters or {}), tensors)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(encode(ckpt))
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode(f.read())


def state_from_checkpoint(ckpt: Checkpoint, plan: ShardingPlan | None = None,
                          mesh: DeviceMesh | None = None) -> TrainState:
    mesh = mesh or single_host_mesh()
    params = ckpt.tree("params")
    if not params:
        raise CheckpointError("checkpoint holds no parameters")
    trees = {}
    for tree in TREES:
        arrays = ckpt.tree(tree)
        if set(arrays) != set(params):
            missing = sorted(set(params) ^ set(arrays))
            raise CheckpointError(f"{tree} tree does not match params: {missing[:5]}")
        out = {}
        for name, arr in arrays.items():
            part = plan.entries[name] if plan is not None else REPLICATED
            out[name] = ShardedTensor.from_global(Tensor(arr), part, mesh.mp_size)
        trees[tree] = out
    return TrainState(ckpt.step, trees["params"], trees["adam_m"], trees["adam_v"], ckpt.seed)


def load_checkpoint(path, plan: ShardingPlan | None = None, mesh: DeviceMesh | None = None) -> TrainState:
    return state_from_checkpoint(read_checkpoint(path), plan, mesh)
