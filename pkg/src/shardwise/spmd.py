"""Sharded execution of unmodified user code on a simulated mesh.

A :class:`DistTensor` is one global value held as a local tensor on every
device of a model-parallel group. When user code calls an op from
:mod:`shardwise.ops` on a DistTensor, the rule registered here runs the
same op on each device's local piece and inserts whatever collective the
partitions require. All local work and every collective are recorded on the
ordinary tape, so :func:`shardwise.tensor.backward` produces the sharded
backward pass, including the dual collectives, without extra code.

Gradient convention: for a replicated value every device carries the full
gradient; for a split value each device carries its slice. Two recorded
collectives keep that convention:

* ``spmd_copy`` (identity forward, all-reduce backward) guards a replicated
  value wherever it feeds per-device computation that yields split results;
* ``spmd_all_reduce`` (all-reduce forward, identity backward) turns partial
  sums from contracting a split dimension into a replicated value.

``spmd_all_gather`` (gather forward, local slice backward) handles the
remaining reshards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from shardwise import ops
from shardwise.mesh import DeviceMesh, MeshError, ShardedTensor
from shardwise.partition import REPLICATED, Partition, Replicated, Split
from shardwise.shardplan import ShardingPlan
from shardwise.tensor import (
    BackwardCtx,
    Graph,
    NonFiniteError,
    OpDef,
    Tensor,
    TensorError,
    TensorOps,
    apply_op,
    as_array,
    backward,
    checked_mode,
    current_graph,
    register_op,
)


class PartitionError(TensorError, ValueError):
    pass


@dataclass(frozen=True)
class GroupContext:
    mesh: DeviceMesh
    group: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.group)


# recorded collectives ---------------------------------------------------------

def _allreduce_fwd(xs, attrs):
    return attrs["ctx"].mesh.all_reduce_arrays(xs, attrs["ctx"].group), None


def _allreduce_bwd(ctx: BackwardCtx, gs, needs):
    return list(gs)


def _copy_fwd(xs, attrs):
    return list(xs), None


def _copy_bwd(ctx: BackwardCtx, gs, needs):
    c = ctx.attrs["ctx"]
    return c.mesh.all_reduce_arrays(list(gs), c.group)


def _gather_fwd(xs, attrs):
    c = attrs["ctx"]
    return c.mesh.all_gather_arrays(xs, attrs["dim"], c.group), None


def _gather_bwd(ctx: BackwardCtx, gs, needs):
    d = ctx.attrs["dim"]
    out, start = [], 0
    for x, g in zip(ctx.inputs, gs):
        stop = start + x.shape[d]
        idx = [slice(None)] * g.ndim
        idx[d] = slice(start, stop)
        out.append(np.ascontiguousarray(g[tuple(idx)]))
        start = stop
    return out


register_op(OpDef("spmd_all_reduce", _allreduce_fwd, _allreduce_bwd))
register_op(OpDef("spmd_copy", _copy_fwd, _copy_bwd))
register_op(OpDef("spmd_all_gather", _gather_fwd, _gather_bwd))


# DistTensor ------------------------------------------------------------------

class DistTensor(TensorOps):
    """A global tensor spread over a model-parallel group."""

    __slots__ = ("ctx", "locals", "partition", "shape", "_copy")

    def __init__(self, ctx: GroupContext, locals_: Sequence[Tensor], partition: Partition,
                 shape: Sequence[int] | None = None):
        if len(locals_) != ctx.n:
            raise PartitionError(f"{len(locals_)} local pieces for a group of {ctx.n}")
        self.ctx = ctx
        self.locals = list(locals_)
        self.partition = partition
        if shape is None:
            shape = list(self.locals[0].shape)
            if isinstance(partition, Split):
                shape[partition.dim] = sum(t.shape[partition.dim] for t in self.locals)
        self.shape = tuple(shape)
        self._copy = None

    @property
    def dtype(self):
        return self.locals[0].dtype

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def is_integer(self) -> bool:
        return self.locals[0].is_integer

    @property
    def split_dim(self) -> int | None:
        return self.partition.dim if isinstance(self.partition, Split) else None

    def numpy(self) -> np.ndarray:
        """Host-side reassembly of the global value (not a device collective)."""
        if isinstance(self.partition, Split):
            return np.concatenate([t.data for t in self.locals], axis=self.partition.dim)
        return self.locals[0].data

    def item(self) -> float:
        return self.numpy().item()

    def detach(self) -> "DistTensor":
        return DistTensor(self.ctx, [t.detach() for t in self.locals], self.partition, self.shape)

    def tracked(self) -> bool:
        g = current_graph()
        return any(t.tracked_in(g) for t in self.locals)

    def __repr__(self) -> str:
        return f"DistTensor(shape={self.shape}, {self.partition}, group={self.ctx.group})"

    @classmethod
    def __tensor_op__(cls, name, args, kwargs):
        rule = _RULES.get(name)
        if rule is None:
            raise PartitionError(f"op {name!r} has no sharded execution rule")
        return rule(*args, **kwargs)

    @classmethod
    def __tensor_grad__(cls, fn, params, *args, **kwargs):
        return dist_value_and_grad(fn, params, *args, **kwargs)


def _ctx_of(args) -> GroupContext:
    for a in args:
        if isinstance(a, DistTensor):
            return a.ctx
        if isinstance(a, (list, tuple)):
            for b in a:
                if isinstance(b, DistTensor):
                    return b.ctx
    raise PartitionError("no sharded operand")


def promote(ctx: GroupContext, x, dtype=None) -> DistTensor:
    """Wrap a host value as a replicated constant on every device of ``ctx``."""
    if isinstance(x, DistTensor):
        return x
    if isinstance(x, Tensor):
        if x.tracked_in(current_graph()):
            raise PartitionError("a recorded single-device tensor cannot mix with sharded values")
        t = x
    else:
        arr = np.asarray(x)
        if dtype is not None and arr.dtype.kind != "i":
            arr = arr.astype(dtype)
        t = Tensor._wrap(as_array(arr))
    return DistTensor(ctx, [t] * ctx.n, REPLICATED, t.shape)


def _record(name: str, ctx: GroupContext, xs: Sequence[Tensor], attrs: dict) -> list[Tensor]:
    return apply_op(name, list(xs), {"ctx": ctx, **attrs})


def copy_to_group(x: DistTensor) -> DistTensor:
    """Identity whose backward all-reduces; cached per value and graph."""
    if not isinstance(x.partition, Replicated) or x.ctx.n == 1 or not x.tracked():
        return x
    g = current_graph()
    if x._copy is not None and x._copy[0] is g:
        return x._copy[1]
    out = DistTensor(x.ctx, _record("spmd_copy", x.ctx, x.locals, {}), REPLICATED, x.shape)
    x._copy = (g, out)
    return out


def reduce_partials(ctx: GroupContext, partials: Sequence[Tensor]) -> DistTensor:
    if ctx.n == 1:
        return DistTensor(ctx, list(partials), REPLICATED)
    return DistTensor(ctx, _record("spmd_all_reduce", ctx, partials, {}), REPLICATED)


def to_replicated(x: DistTensor) -> DistTensor:
    if isinstance(x.partition, Replicated):
        return x
    if x.ctx.n == 1:
        return DistTensor(x.ctx, x.locals, REPLICATED, x.shape)
    outs = _record("spmd_all_gather", x.ctx, x.locals, {"dim": x.partition.dim})
    return DistTensor(x.ctx, outs, REPLICATED, x.shape)


def can_split(x, dim: int, n: int) -> bool:
    return 0 <= dim < len(x.shape) and x.shape[dim] % n == 0


def to_split(x: DistTensor, dim: int) -> DistTensor:
    """Reshard to Split(dim); replicated inputs are sliced locally."""
    if x.split_dim == dim:
        return x
    if not can_split(x, dim, x.ctx.n):
        raise PartitionError(f"cannot split dim {dim} of {x.shape} {x.ctx.n} ways")
    if isinstance(x.partition, Split):
        x = to_replicated(x)
    x = copy_to_group(x)
    step = x.shape[dim] // x.ctx.n
    pieces = [ops.slice_axis(t, dim, i * step, (i + 1) * step) for i, t in enumerate(x.locals)]
    return DistTensor(x.ctx, pieces, Split(dim), x.shape)


def _local(fn: Callable, ctx: GroupContext, dist_args: Sequence[DistTensor], partition: Partition,
           **kwargs) -> DistTensor:
    outs = [fn(*(a.locals[i] for a in dist_args), **kwargs) for i in range(ctx.n)]
    return DistTensor(ctx, outs, partition)


# rules -------------------------------------------------------------------------

_RULES: dict[str, Callable] = {}


def rule(name):
    def deco(fn):
        _RULES[name] = fn
        return fn
    return deco


def _out_dim(dim: int, rank: int, out_rank: int) -> int:
    return dim + (out_rank - rank)


def _elementwise(fn, a, b):
    ctx = _ctx_of((a, b))
    dt = ops._float_dtype(a, b)
    a, b = promote(ctx, a, dt), promote(ctx, b, dt)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        from shardwise.tensor import ShapeError
        raise ShapeError(fn.__name__, a.shape, b.shape, detail="not broadcastable") from None
    r = len(out_shape)
    da = None if a.split_dim is None else _out_dim(a.split_dim, a.ndim, r)
    db = None if b.split_dim is None else _out_dim(b.split_dim, b.ndim, r)
    if da is None and db is None:
        return _local(fn, ctx, (a, b), REPLICATED)
    if da is not None and db is not None and da != db:
        b = to_replicated(b)
        db = None
    target = da if da is not None else db

    def align(x):
        if x.split_dim is not None:
            return x
        e = target - (r - x.ndim)
        if e < 0 or x.shape[e] == 1:
            return copy_to_group(x)
        return to_split(x, e)

    return _local(fn, ctx, (align(a), align(b)), Split(target))


@rule("add")
def _r_add(a, b):
    return _elementwise(ops.add, a, b)


@rule("sub")
def _r_sub(a, b):
    return _elementwise(ops.sub, a, b)


@rule("multiply")
def _r_multiply(a, b):
    return _elementwise(ops.multiply, a, b)


@rule("matmul")
def _r_matmul(a, b):
    ctx = _ctx_of((a, b))
    dt = ops._float_dtype(a, b)
    a, b = promote(ctx, a, dt), promote(ctx, b, dt)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        from shardwise.tensor import ShapeError
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    r = max(a.ndim, b.ndim)

    def role(x, is_left):
        d = x.split_dim
        if d is None:
            return None
        if d == x.ndim - 1:
            return "k" if is_left else ("n", r - 1)
        if d == x.ndim - 2:
            return ("m", r - 2) if is_left else "k"
        return ("batch", _out_dim(d, x.ndim, r))

    ra, rb = role(a, True), role(b, False)
    if ra == "k" and rb != "k":
        if rb is None:
            b = to_split(b, b.ndim - 2)
        else:
            a = to_replicated(a)
        ra, rb = role(a, True), role(b, False)
    elif rb == "k" and ra != "k":
        if ra is None:
            a = to_split(a, a.ndim - 1)
        else:
            b = to_replicated(b)
        ra, rb = role(a, True), role(b, False)

    if ra == "k" and rb == "k":
        partials = [ops.matmul(a.locals[i], b.locals[i]) for i in range(ctx.n)]
        return reduce_partials(ctx, partials)
    if ra is None and rb is None:
        return _local(ops.matmul, ctx, (a, b), REPLICATED)
    if ra is not None and rb is not None and ra[1] != rb[1]:
        b = to_replicated(b)
        rb = None
    out = (ra or rb)[1]

    def align(x):
        if x.split_dim is not None:
            return x
        e = out - (r - x.ndim)
        if out >= r - 2 or e < 0 or x.shape[e] == 1:
            return copy_to_group(x)
        return to_split(x, e)

    return _local(ops.matmul, ctx, (align(a), align(b)), Split(out))


@rule("transpose")
def _r_transpose(x, axes=None):
    nd = x.ndim
    axes = tuple(reversed(range(nd))) if axes is None else tuple(a % nd for a in axes)
    part = x.partition if x.split_dim is None else Split(axes.index(x.split_dim))
    return _local(ops.transpose, x.ctx, (x,), part, axes=axes)


@rule("reshape")
def _r_reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.size:
        from shardwise.tensor import ShapeError
        raise ShapeError("reshape", x.shape, shape, detail="element counts differ")
    n = x.ctx.n
    d = x.split_dim
    if d is not None:
        pre = int(np.prod(x.shape[:d]))
        for e in range(len(shape)):
            if int(np.prod(shape[:e])) == pre and shape[e] % n == 0 and shape[e] >= n:
                local = list(shape)
                local[e] //= n
                return _local(ops.reshape, x.ctx, (x,), Split(e), shape=tuple(local))
        x = to_replicated(x)
    return _local(ops.reshape, x.ctx, (x,), REPLICATED, shape=shape)


@rule("slice_axis")
def _r_slice(x, axis, start, stop):
    axis %= x.ndim
    if x.split_dim == axis:
        x = to_replicated(x)
    return _local(ops.slice_axis, x.ctx, (x,), x.partition, axis=axis, start=start, stop=stop)


@rule("concat")
def _r_concat(xs, axis=0):
    ctx = _ctx_of(xs)
    xs = [promote(ctx, x) for x in xs]
    axis %= xs[0].ndim
    dims = {x.split_dim for x in xs}
    if len(dims) != 1 or axis in dims:
        xs = [to_replicated(x) for x in xs]
    part = xs[0].partition
    outs = [ops.concat([x.locals[i] for x in xs], axis=axis) for i in range(ctx.n)]
    return DistTensor(ctx, outs, part)


def _unary_local(fn):
    def r(x, *args, **kwargs):
        return _local(lambda t: fn(t, *args, **kwargs), x.ctx, (x,), x.partition)
    return r


_RULES["gelu"] = _unary_local(ops.gelu)
_RULES["relu"] = _unary_local(ops.relu)
_RULES["stop_gradient"] = _unary_local(ops.stop_gradient)


@rule("normalize")
def _r_normalize(x, eps=1e-5):
    if x.split_dim == x.ndim - 1:
        x = to_replicated(x)
    return _local(ops.normalize, x.ctx, (x,), x.partition, eps=eps)


@rule("softmax")
def _r_softmax(x, axis=-1):
    axis %= x.ndim
    if x.split_dim == axis:
        x = to_replicated(x)
    return _local(ops.softmax, x.ctx, (x,), x.partition, axis=axis)


@rule("embedding_lookup")
def _r_embedding(table, ids):
    ctx = _ctx_of((table, ids))
    table = to_replicated(promote(ctx, table))
    ids = to_replicated(promote(ctx, ops._ids(ids) if not isinstance(ids, DistTensor) else ids))
    return _local(ops.embedding_lookup, ctx, (table, ids), REPLICATED)


@rule("softmax_cross_entropy")
def _r_xent(logits, labels):
    ctx = _ctx_of((logits, labels))
    logits = promote(ctx, logits)
    labels = promote(ctx, ops._ids(labels) if not isinstance(labels, DistTensor) else labels)
    d = logits.split_dim
    if d == logits.ndim - 1:
        logits = to_replicated(logits)
        d = None
    if d is None:
        return _local(ops.softmax_cross_entropy, ctx, (to_replicated(logits), to_replicated(labels)),
                      REPLICATED)
    if labels.split_dim != d:
        labels = to_split(to_replicated(labels), d)
    return _local(ops.softmax_cross_entropy, ctx, (logits, labels), Split(d))


def _reduce(kind, x, axis, keepdims):
    nd = x.ndim
    axes = tuple(range(nd)) if axis is None else (
        (axis % nd,) if isinstance(axis, int) else tuple(sorted(a % nd for a in axis)))
    d = x.split_dim
    if d is None:
        fn = ops.reduce_sum if kind == "sum" else ops.reduce_mean
        return _local(fn, x.ctx, (x,), REPLICATED, axis=axes, keepdims=keepdims)
    if d in axes:
        partials = [ops.reduce_sum(t, axis=axes, keepdims=keepdims) for t in x.locals]
        if kind == "mean":
            count = int(np.prod([x.shape[a] for a in axes]))
            partials = [ops.multiply(p, 1.0 / count) for p in partials]
        return reduce_partials(x.ctx, partials)
    fn = ops.reduce_sum if kind == "sum" else ops.reduce_mean
    new_d = d if keepdims else d - sum(1 for a in axes if a < d)
    return _local(fn, x.ctx, (x,), Split(new_d), axis=axes, keepdims=keepdims)


@rule("reduce_sum")
def _r_reduce_sum(x, axis=None, keepdims=False):
    return _reduce("sum", x, axis, keepdims)


@rule("reduce_mean")
def _r_reduce_mean(x, axis=None, keepdims=False):
    return _reduce("mean", x, axis, keepdims)


# explicit parallel linear layers ----------------------------------------------

def column_parallel_linear(x: DistTensor, kernel: DistTensor, bias=None) -> DistTensor:
    """Replicated input, Split(0) kernel ``[out, in]`` -> output split on features.

    No collective in forward; backward all-reduces the input gradient.
    """
    if not isinstance(x.partition, Replicated):
        raise PartitionError(f"column_parallel_linear: expected replicated input, got {x.partition}")
    if kernel.partition != Split(0):
        raise PartitionError(f"column_parallel_linear: expected split:0 kernel, got {kernel.partition}")
    return ops.linear(x, kernel, bias)


def row_parallel_linear(x: DistTensor, kernel: DistTensor, bias=None) -> DistTensor:
    """Feature-split input, Split(1) kernel -> replicated output via one all-reduce."""
    if x.split_dim != x.ndim - 1:
        raise PartitionError(f"row_parallel_linear: expected input split:{x.ndim - 1}, "
                             f"got {x.partition}")
    if kernel.partition != Split(1):
        raise PartitionError(f"row_parallel_linear: expected split:1 kernel, got {kernel.partition}")
    return ops.linear(x, kernel, bias)


# parameters and state --------------------------------------------------------------

def shard_params(params: Mapping[str, Any], plan: ShardingPlan, mesh: DeviceMesh) -> dict[str, ShardedTensor]:
    """Cut every parameter into ``mesh.mp_size`` pieces per ``plan``."""
    n = mesh.mp_size
    out = {}
    for name, value in params.items():
        if name not in plan.entries:
            raise PartitionError(f"{name}: missing from sharding plan")
        t = value if isinstance(value, Tensor) else Tensor(value)
        part = plan.entries[name]
        if isinstance(part, Split):
            if not 0 <= part.dim < t.ndim or t.shape[part.dim] % n:
                raise PartitionError(f"{name}: cannot apply {part} to shape {t.shape} with mp={n}")
        out[name] = ShardedTensor.from_global(t, part, n)
    extra = set(plan.entries) - set(params)
    if extra:
        raise PartitionError(f"plan names unknown parameters: {sorted(extra)}")
    return out


def gather_params(sharded: Mapping[str, ShardedTensor]) -> dict[str, Tensor]:
    return {name: st.to_global() for name, st in sharded.items()}


@dataclass
class TrainState:
    step: int
    params: dict[str, ShardedTensor]
    adam_m: dict[str, ShardedTensor]
    adam_v: dict[str, ShardedTensor]
    rng_seed: int = 0

    @classmethod
    def create(cls, params: Mapping[str, Any], plan: ShardingPlan, mesh: DeviceMesh,
               rng_seed: int = 0) -> "TrainState":
        sharded = shard_params(params, plan, mesh)
        zeros = {k: ShardedTensor(st.global_shape, st.partition,
                                  [Tensor(np.zeros_like(s.data)) for s in st.shards])
                 for k, st in sharded.items()}
        return cls(0, sharded, zeros, {k: ShardedTensor(v.global_shape, v.partition, list(v.shards))
                                       for k, v in zeros.items()}, rng_seed)

    def gathered(self) -> dict[str, Tensor]:
        return gather_params(self.params)

    def per_device_elements(self) -> list[int]:
        """Parameter plus optimizer-moment elements held by each mp rank."""
        n = next(iter(self.params.values())).n_shards
        return [sum(st.local_elements(r) for tree in (self.params, self.adam_m, self.adam_v)
                    for st in tree.values()) for r in range(n)]


def expected_per_device_elements(plan: ShardingPlan, shapes: Mapping[str, Sequence[int]], mp: int,
                                 with_optimizer: bool = True) -> int:
    from shardwise.shardplan import element_counts
    rep, split = element_counts(plan, shapes)
    if split % mp:
        raise PartitionError(f"{split} split elements do not divide by mp={mp}")
    per = rep + split // mp
    return 3 * per if with_optimizer else per


# forward / backward -----------------------------------------------------------

def split_batch(batch: Mapping[str, Any], n: int) -> list[dict[str, np.ndarray]]:
    parts: list[dict[str, np.ndarray]] = [{} for _ in range(n)]
    for k, v in batch.items():
        arr = as_array(v)
        if arr.ndim == 0 or arr.shape[0] % n:
            raise PartitionError(f"batch entry {k!r} with shape {arr.shape} cannot be split over dp={n}")
        for i, piece in enumerate(np.split(arr, n, axis=0)):
            parts[i][k] = piece
    return parts


def _bind(ctx: GroupContext, g: Graph, sharded: Mapping[str, ShardedTensor]) -> dict[str, DistTensor]:
    return {name: DistTensor(ctx, [g.leaf(s.data) for s in st.shards], st.partition, st.global_shape)
            for name, st in sharded.items()}


def _loss_locals(loss, ctx: GroupContext) -> list[Tensor]:
    if isinstance(loss, DistTensor):
        if loss.size != 1:
            raise TensorError(f"loss must be scalar, got shape {loss.shape}")
        return to_replicated(loss).locals
    t = loss if isinstance(loss, Tensor) else Tensor(loss)
    if t.size != 1:
        raise TensorError(f"loss must be scalar, got shape {t.shape}")
    return [t] * ctx.n


def _collect_grads(g: Graph, bound: Mapping[str, DistTensor], cots) -> dict[str, ShardedTensor]:
    out = {}
    for name, d in bound.items():
        shards = [Tensor._wrap(np.array(cots[t.ref]) if t.ref in cots else np.zeros_like(t.data))
                  for t in d.locals]
        if isinstance(d.partition, Replicated):
            first = shards[0].data
            if any(not np.array_equal(first, s.data) for s in shards[1:]):
                raise PartitionError(f"{name}: replicated gradient differs across devices")
            shards = [shards[0]] * len(shards)
        out[name] = ShardedTensor(d.shape, d.partition, shards)
    return out


def replica_forward_backward(loss_fn: Callable, params: Mapping[str, ShardedTensor], batch,
                             mesh: DeviceMesh, dp_rank: int, rng=None):
    """Loss and sharded gradients for one data-parallel replica."""
    ctx = GroupContext(mesh, mesh.mp_group(dp_rank))
    with Graph() as g:
        bound = _bind(ctx, g, params)
        loss = loss_fn(rng, batch, bound)
        locs = _loss_locals(loss, ctx)
    leaves = [t for d in bound.values() for t in d.locals]
    cots = backward(g, {t: 1.0 for t in locs if t.tracked_in(g)}, leaves)
    value = float(locs[0].data.reshape(()))
    if checked_mode() and not math.isfinite(value):
        raise NonFiniteError("loss")
    return value, _collect_grads(g, bound, cots)


def dp_sync_grads(replica_grads: Sequence[Mapping[str, ShardedTensor]],
                  mesh: DeviceMesh) -> list[dict[str, ShardedTensor]]:
    """Average gradients over the data-parallel axis; one all-reduce per tensor per mp rank."""
    dp = mesh.dp_size
    if len(replica_grads) != dp:
        raise MeshError(f"expected {dp} replica gradient sets, got {len(replica_grads)}")
    if dp == 1:
        return [dict(replica_grads[0])]
    out = [dict() for _ in range(dp)]
    for name in replica_grads[0]:
        first = replica_grads[0][name]
        per_rank = []
        for m in range(mesh.mp_size):
            summed = mesh.all_reduce_arrays([rg[name].shards[m].data for rg in replica_grads],
                                            mesh.dp_group(m))
            per_rank.append(Tensor._wrap(summed[0] / dp))
        if isinstance(first.partition, Replicated):
            per_rank = [per_rank[0]] * len(per_rank)
        for r in range(dp):
            out[r][name] = ShardedTensor(first.global_shape, first.partition, list(per_rank))
    return out


def spmd_forward_backward(loss_fn: Callable, state: TrainState, batch, mesh: DeviceMesh,
                          rng_factory: Callable[[int], Any] | None = None):
    """Run ``loss_fn`` sharded over ``mesh`` and return the dp-averaged loss and gradients.

    ``batch`` is the global batch; it is cut along dim 0 across dp replicas and
    replicated inside each mp group. ``rng_factory(dp_rank)`` supplies the
    per-replica rng passed to ``loss_fn``.
    """
    parts = split_batch(batch, mesh.dp_size)
    losses, grads = [], []
    for r, part in enumerate(parts):
        rng = rng_factory(r) if rng_factory else None
        loss, g = replica_forward_backward(loss_fn, state.params, part, mesh, r, rng)
        losses.append(loss)
        grads.append(g)
    synced = dp_sync_grads(grads, mesh)
    total = 0.0
    for v in losses:
        total += v
    return total / len(losses), synced[0]


def reference_forward_backward(loss_fn: Callable, params: Mapping[str, Any], batch, rng=None):
    """Single-device oracle path: the same ``loss_fn`` on plain tensors."""
    from shardwise.tensor import grad
    with Graph() as g:
        bound = {k: g.leaf(as_array(v)) for k, v in params.items()}
        loss = loss_fn(rng, {k: as_array(v) for k, v in batch.items()}, bound)
    if loss.size != 1:
        raise TensorError(f"loss must be scalar, got shape {loss.shape}")
    grads = grad(g, loss, bound)
    return float(loss.data.reshape(())), grads


def dist_value_and_grad(fn, params: Mapping[str, DistTensor], *args, **kwargs):
    """Nested differentiation for sharded parameters; results are constants."""
    ctx = _ctx_of(tuple(params.values()))
    with Graph() as g:
        bound = {k: DistTensor(ctx, [g.leaf(t.data) for t in v.locals], v.partition, v.shape)
                 for k, v in params.items()}
        value = fn(bound, *args, **kwargs)
        locs = _loss_locals(value, ctx)
    leaves = [t for d in bound.values() for t in d.locals]
    cots = backward(g, {t: 1.0 for t in locs if t.tracked_in(g)}, leaves)
    grads = {}
    for k, d in bound.items():
        pieces = [Tensor._wrap(np.array(cots[t.ref]) if t.ref in cots else np.zeros_like(t.data))
                  for t in d.locals]
        grads[k] = DistTensor(ctx, pieces, d.partition, d.shape)
    val = DistTensor(ctx, [t.detach() for t in locs], REPLICATED, ())
    return val, grads


def sharded_call(fn: Callable, params: Mapping[str, ShardedTensor], mesh: DeviceMesh, dp_rank: int = 0,
                 *args, **kwargs):
    """Forward-only sharded execution of ``fn(params, *args)`` on one mp group."""
    ctx = GroupContext(mesh, mesh.mp_group(dp_rank))
    bound = {name: DistTensor(ctx, list(st.shards), st.partition, st.global_shape)
             for name, st in params.items()}
    return fn(bound, *args, **kwargs)


# optimizer ------------------------------------------------------------------------

def adamw_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, step: int, lr: float,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
    """One AdamW update with bias correction; ``step`` is the 1-based count after this update."""
    m = b1 * m + (1.0 - b1) * g
    v = b2 * v + (1.0 - b2) * (g * g)
    mhat = m / (1.0 - b1 ** step)
    vhat = v / (1.0 - b2 ** step)
    upd = mhat / (np.sqrt(vhat) + eps) + weight_decay * p
    return (p - lr * upd).astype(p.dtype, copy=False), m.astype(p.dtype, copy=False), \
        v.astype(p.dtype, copy=False)


def adamw_step(state: TrainState, grads: Mapping[str, ShardedTensor], lr: float, b1: float = 0.9,
               b2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> TrainState:
    """Shard-local AdamW; moments are partitioned exactly like their parameter."""
    step = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, st in state.params.items():
        gs = grads[name]
        if gs.partition != st.partition:
            raise PartitionError(f"{name}: gradient partition {gs.partition} != parameter {st.partition}")
        mst, vst = state.adam_m[name], state.adam_v[name]
        ps, ms, vs = [], [], []
        for r in range(st.n_shards):
            if isinstance(st.partition, Replicated) and r > 0:
                ps.append(ps[0]); ms.append(ms[0]); vs.append(vs[0])
                continue
            g = gs.shards[r].data
            if checked_mode() and not np.all(np.isfinite(g)):
                raise NonFiniteError("adamw_step", where=f"gradient of {name}")
            p, m, v = adamw_update(st.shards[r].data, g, mst.shards[r].data, vst.shards[r].data, step,
                                   lr, b1, b2, eps, weight_decay)
            ps.append(Tensor._wrap(p)); ms.append(Tensor._wrap(m)); vs.append(Tensor._wrap(v))
        new_p[name] = ShardedTensor(st.global_shape, st.partition, ps)
        new_m[name] = ShardedTensor(st.global_shape, st.partition, ms)
        new_v[name] = ShardedTensor(st.global_shape, st.partition, vs)
    return replace(state, step=step, params=new_p, adam_m=new_m, adam_v=new_v)
