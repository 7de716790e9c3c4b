"""Simulated device mesh with deterministic collectives and byte accounting.

Devices are numbered ``dp_rank * mp_size + mp_rank`` so each model-parallel
group is a contiguous id range and sits inside one host whenever the host is
large enough. Hosts are contiguous blocks of ``devices_per_host`` ids.

Collectives follow a ring schedule over the group in ascending id order. The
payload is cut into ``n`` chunks (``numpy.array_split`` on elements) and each
hop's bytes are attributed to the link between the sender and its ring
successor, intra-host or inter-host. Reductions always add shards in
ascending device order so results are bit-reproducible.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from shardwise.partition import REPLICATED, Partition, Replicated, Split
from shardwise.tensor import Tensor


class MeshError(ValueError):
    pass


KINDS = ("all_reduce", "all_gather", "reduce_scatter")


@dataclass(frozen=True)
class CommEvent:
    kind: str
    group: tuple[int, ...]
    payload_bytes: int
    wire_bytes: int
    intra_host_bytes: int
    inter_host_bytes: int


@dataclass
class CommRow:
    collective: str
    count: int = 0
    payload_bytes: int = 0
    wire_bytes: int = 0
    intra_host_bytes: int = 0
    inter_host_bytes: int = 0


@dataclass
class CommReport:
    rows: dict[str, CommRow]

    @property
    def total_payload_bytes(self) -> int:
        return sum(r.payload_bytes for r in self.rows.values())

    @property
    def total_wire_bytes(self) -> int:
        return sum(r.wire_bytes for r in self.rows.values())

    @property
    def total_count(self) -> int:
        return sum(r.count for r in self.rows.values())

    def __getitem__(self, kind: str) -> CommRow:
        return self.rows[kind]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["collective", "count", "payload_bytes", "wire_bytes",
                    "intra_host_bytes", "inter_host_bytes"])
        for kind in KINDS:
            r = self.rows[kind]
            w.writerow([kind, r.count, r.payload_bytes, r.wire_bytes,
                        r.intra_host_bytes, r.inter_host_bytes])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CommReport":
        rows = {}
        for rec in csv.DictReader(io.StringIO(text)):
            rows[rec["collective"]] = CommRow(rec["collective"], *(int(rec[k]) for k in (
                "count", "payload_bytes", "wire_bytes", "intra_host_bytes", "inter_host_bytes")))
        return cls(rows)


@dataclass
class ShardedTensor:
    """A global tensor held as one shard per device of a group."""

    global_shape: tuple[int, ...]
    partition: Partition
    shards: list[Tensor]

    def __post_init__(self):
        self.global_shape = tuple(self.global_shape)
        if isinstance(self.partition, Split):
            d = self.partition.dim
            if not 0 <= d < len(self.global_shape):
                raise MeshError(f"split dim {d} out of range for shape {self.global_shape}")
            for s in self.shards:
                if s.ndim != len(self.global_shape) or any(
                        a != b for i, (a, b) in enumerate(zip(s.shape, self.global_shape)) if i != d):
                    raise MeshError(f"shard shape {s.shape} inconsistent with {self.global_shape} split on {d}")
            if sum(s.shape[d] for s in self.shards) != self.global_shape[d]:
                raise MeshError(f"shard sizes along dim {d} do not sum to {self.global_shape[d]}")
        else:
            for s in self.shards:
                if s.shape != self.global_shape:
                    raise MeshError(f"replicated shard shape {s.shape} != {self.global_shape}")

    @classmethod
    def from_global(cls, x, partition: Partition, n: int) -> "ShardedTensor":
        t = x if isinstance(x, Tensor) else Tensor(x)
        if isinstance(partition, Split):
            if not 0 <= partition.dim < t.ndim:
                raise MeshError(f"split dim {partition.dim} out of range for shape {t.shape}")
            parts = np.array_split(t.data, n, axis=partition.dim)
            return cls(t.shape, partition, [Tensor(p) for p in parts])
        return cls(t.shape, REPLICATED, [t] * n)

    @property
    def n_shards(self) -> int:
        return len(self.shards)

    @property
    def dtype(self):
        return self.shards[0].dtype

    def to_global(self) -> Tensor:
        """Host-side reassembly; no communication is counted."""
        if isinstance(self.partition, Split):
            return Tensor(np.concatenate([s.data for s in self.shards], axis=self.partition.dim))
        return self.shards[0]

    def local_elements(self, rank: int) -> int:
        return self.shards[rank].size


def _chunk_bytes(n_elements: int, n: int, itemsize: int) -> list[int]:
    base, extra = divmod(n_elements, n)
    return [(base + (1 if j < extra else 0)) * itemsize for j in range(n)]


class DeviceMesh:
    """dp × mp grid of simulated devices grouped into hosts."""

    def __init__(self, n_hosts: int, devices_per_host: int, dp_size: int, mp_size: int):
        vals = dict(n_hosts=n_hosts, devices_per_host=devices_per_host,
                    dp_size=dp_size, mp_size=mp_size)
        if any(not isinstance(v, (int, np.integer)) or v < 1 for v in vals.values()) \
                or n_hosts * devices_per_host != dp_size * mp_size:
            raise MeshError("inconsistent mesh: " + ", ".join(f"{k}={v}" for k, v in vals.items())
                            + " (need n_hosts*devices_per_host == dp_size*mp_size, all >= 1)")
        self.n_hosts = int(n_hosts)
        self.devices_per_host = int(devices_per_host)
        self.dp_size = int(dp_size)
        self.mp_size = int(mp_size)
        self.events: list[CommEvent] = []

    @property
    def n_devices(self) -> int:
        return self.dp_size * self.mp_size

    @property
    def hosts(self) -> list[tuple[int, ...]]:
        h = self.devices_per_host
        return [tuple(range(i * h, (i + 1) * h)) for i in range(self.n_hosts)]

    def host_of(self, device: int) -> int:
        return device // self.devices_per_host

    def device_id(self, dp_rank: int, mp_rank: int) -> int:
        return dp_rank * self.mp_size + mp_rank

    def mp_group(self, dp_rank: int) -> tuple[int, ...]:
        return tuple(self.device_id(dp_rank, r) for r in range(self.mp_size))

    def dp_group(self, mp_rank: int) -> tuple[int, ...]:
        return tuple(self.device_id(d, mp_rank) for d in range(self.dp_size))

    def mp_groups(self) -> list[tuple[int, ...]]:
        return [self.mp_group(d) for d in range(self.dp_size)]

    def dp_groups(self) -> list[tuple[int, ...]]:
        return [self.dp_group(m) for m in range(self.mp_size)]

    def reset(self) -> None:
        self.events.clear()

    def __repr__(self) -> str:
        return (f"DeviceMesh(hosts={self.n_hosts}x{self.devices_per_host}, "
                f"dp={self.dp_size}, mp={self.mp_size})")

    # accounting ------------------------------------------------------------

    def _record(self, kind: str, group: Sequence[int], payload: int, sent: list[int]) -> None:
        n = len(group)
        intra = inter = 0
        for k, b in enumerate(sent):
            if self.host_of(group[k]) == self.host_of(group[(k + 1) % n]):
                intra += b
            else:
                inter += b
        self.events.append(CommEvent(kind, tuple(group), int(payload), intra + inter, intra, inter))

    def _check_group(self, group: Sequence[int], n_inputs: int) -> tuple[int, ...]:
        group = tuple(int(g) for g in group)
        if len(group) != n_inputs:
            raise MeshError(f"group of {len(group)} devices got {n_inputs} inputs")
        if len(set(group)) != len(group) or any(not 0 <= g < self.n_devices for g in group):
            raise MeshError(f"invalid device group {group}")
        if list(group) != sorted(group):
            raise MeshError(f"device group must be in ascending order, got {group}")
        return group

    # collectives -----------------------------------------------------------

    def all_reduce_arrays(self, xs: Sequence[np.ndarray], group: Sequence[int]) -> list[np.ndarray]:
        group = self._check_group(group, len(xs))
        shape = xs[0].shape
        for x in xs:
            if x.shape != shape:
                raise MeshError(f"all_reduce: shard shapes differ within group: {[x.shape for x in xs]}")
        n = len(xs)
        if n == 1:
            return [xs[0]]
        total = xs[0].copy()
        for x in xs[1:]:
            total = total + x
        payload = xs[0].nbytes
        chunks = _chunk_bytes(xs[0].size, n, xs[0].itemsize)
        sent = [(payload - chunks[(k + 1) % n]) + (payload - chunks[(k + 2) % n]) for k in range(n)]
        self._record("all_reduce", group, payload, sent)
        return [total] * n

    def all_gather_arrays(self, xs: Sequence[np.ndarray], dim: int,
                          group: Sequence[int]) -> list[np.ndarray]:
        group = self._check_group(group, len(xs))
        nd = xs[0].ndim
        if not 0 <= dim < nd:
            raise MeshError(f"all_gather: dim {dim} out of range for rank {nd}")
        for x in xs:
            if x.ndim != nd or any(a != b for i, (a, b) in enumerate(zip(x.shape, xs[0].shape)) if i != dim):
                raise MeshError(f"all_gather: unequal shard shapes {[x.shape for x in xs]}")
        n = len(xs)
        if n == 1:
            return [xs[0]]
        full = np.concatenate(xs, axis=dim)
        sent = [full.nbytes - xs[(k + 1) % n].nbytes for k in range(n)]
        self._record("all_gather", group, full.nbytes, sent)
        return [full] * n

    def reduce_scatter_arrays(self, xs: Sequence[np.ndarray], dim: int,
                              group: Sequence[int]) -> list[np.ndarray]:
        group = self._check_group(group, len(xs))
        shape = xs[0].shape
        if not 0 <= dim < len(shape):
            raise MeshError(f"reduce_scatter: dim {dim} out of range for rank {len(shape)}")
        for x in xs:
            if x.shape != shape:
                raise MeshError(f"reduce_scatter: shard shapes differ within group: {[x.shape for x in xs]}")
        n = len(xs)
        if n == 1:
            return [xs[0]]
        total = xs[0].copy()
        for x in xs[1:]:
            total = total + x
        parts = np.array_split(total, n, axis=dim)
        sent = [total.nbytes - parts[k].nbytes for k in range(n)]
        self._record("reduce_scatter", group, total.nbytes, sent)
        return [np.ascontiguousarray(p) for p in parts]

    def all_reduce(self, xs: Sequence, group: Sequence[int]) -> list[Tensor]:
        out = self.all_reduce_arrays([_arr(x) for x in xs], group)
        return [Tensor(o) for o in out]

    def all_gather(self, x: ShardedTensor, group: Sequence[int]) -> list[Tensor]:
        if not isinstance(x.partition, Split):
            raise MeshError("all_gather requires a Split input, got replicated")
        out = self.all_gather_arrays([s.data for s in x.shards], x.partition.dim, group)
        return [Tensor(o) for o in out]

    def reduce_scatter(self, xs: Sequence, group: Sequence[int], dim: int) -> ShardedTensor:
        arrs = [_arr(x) for x in xs]
        out = self.reduce_scatter_arrays(arrs, dim, group)
        return ShardedTensor(arrs[0].shape, Split(dim), [Tensor(o) for o in out])

    def comm_report(self) -> CommReport:
        rows = {k: CommRow(k) for k in KINDS}
        for e in self.events:
            r = rows[e.kind]
            r.count += 1
            r.payload_bytes += e.payload_bytes
            r.wire_bytes += e.wire_bytes
            r.intra_host_bytes += e.intra_host_bytes
            r.inter_host_bytes += e.inter_host_bytes
        return CommReport(rows)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def build_mesh(n_hosts: int, devices_per_host: int, dp_size: int, mp_size: int) -> DeviceMesh:
    return DeviceMesh(n_hosts, devices_per_host, dp_size, mp_size)


def comm_report(mesh: DeviceMesh) -> CommReport:
    return mesh.comm_report()


def single_host_mesh(dp_size: int = 1, mp_size: int = 1) -> DeviceMesh:
    return DeviceMesh(1, dp_size * mp_size, dp_size, mp_size)
