"""Dense tensors, the recording tape, and reverse-mode differentiation.

A :class:`Tensor` is an immutable numpy array plus an optional binding to the
:class:`Graph` that recorded it. Ops only record while a graph is active
(``with Graph() as g``) and at least one input is bound to that graph; all
other computation is eager and leaves no trace.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
INT_DTYPE = np.dtype(np.int64)


class TensorError(Exception):
    """Base class for tensor-core errors."""


class ShapeError(TensorError, ValueError):
    def __init__(self, op: str, *shapes: Sequence[int], detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(TensorError, FloatingPointError):
    def __init__(self, op: str, where: str = "output"):
        self.op = op
        super().__init__(f"{op}: non-finite values in {where}")


class GradError(TensorError, ValueError):
    pass


_state = threading.local()


def _graph_stack() -> list["Graph"]:
    if not hasattr(_state, "graphs"):
        _state.graphs = []
    return _state.graphs


def current_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


def checked_mode() -> bool:
    return getattr(_state, "checked", False)


class checked:
    """Context manager raising :class:`NonFiniteError` on any non-finite op output."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled

    def __enter__(self):
        self._prev = checked_mode()
        _state.checked = self.enabled
        return self

    def __exit__(self, *exc):
        _state.checked = self._prev
        return False


def _freeze(arr: np.ndarray) -> np.ndarray:
    if arr.flags.writeable:
        arr = arr.copy() if arr.base is not None else arr
        arr.flags.writeable = False
    return arr


def as_array(value: Any, dtype: Any = None) -> np.ndarray:
    if isinstance(value, Tensor):
        arr = value.data
    else:
        arr = np.asarray(value)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype.kind in "iub":
        arr = arr.astype(INT_DTYPE, copy=False)
    elif arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class TensorOps:
    """Operator sugar shared by every tensor-like type; routes through :mod:`ops`."""

    def __add__(self, other):
        from shardwise import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from shardwise import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from shardwise import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from shardwise import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from shardwise import ops
        return ops.multiply(self, other)

    def __rmul__(self, other):
        from shardwise import ops
        return ops.multiply(other, self)

    def __truediv__(self, other):
        from shardwise import ops
        if isinstance(other, (int, float)):
            return ops.multiply(self, 1.0 / other)
        return NotImplemented

    def __neg__(self):
        from shardwise import ops
        return ops.multiply(self, -1.0)

    def __matmul__(self, other):
        from shardwise import ops
        return ops.matmul(self, other)

    @property
    def T(self):
        from shardwise import ops
        axes = list(range(len(self.shape)))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return ops.transpose(self, axes)


class Tensor(TensorOps):
    """Immutable dense array. ``dtype`` is f32/f64, or i64 for index tensors."""

    __slots__ = ("data", "graph", "ref")

    def __init__(self, data: Any, dtype: Any = None):
        self.data = _freeze(np.array(as_array(data, dtype), copy=True))
        self.graph: Graph | None = None
        self.ref: tuple[int, int] | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, graph: "Graph | None" = None,
              ref: tuple[int, int] | None = None) -> "Tensor":
        t = object.__new__(cls)
        t.data = _freeze(arr)
        t.graph = graph
        t.ref = ref
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_integer(self) -> bool:
        return self.data.dtype.kind in "iu"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype)

    def tracked_in(self, graph: "Graph | None") -> bool:
        return graph is not None and self.graph is graph

    def __repr__(self) -> str:
        tag = f", node={self.ref[0]}" if self.ref else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]


# Ops ---------------------------------------------------------------------

# forward(arrays, attrs) -> (outputs, saved); backward(ctx, cotangents, needs) -> input cotangents.
ForwardFn = Callable[[list, dict], tuple[list, Any]]
BackwardFn = Callable[["BackwardCtx", list, list], list]


@dataclass(frozen=True)
class OpDef:
    name: str
    forward: ForwardFn
    backward: BackwardFn | None
    differentiable: bool = True


@dataclass
class BackwardCtx:
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    saved: Any
    attrs: dict


_REGISTRY: dict[str, OpDef] = {}


def register_op(op: OpDef) -> OpDef:
    _REGISTRY[op.name] = op
    return op


def get_op(name: str) -> OpDef:
    return _REGISTRY[name]


@dataclass
class Node:
    op: str
    inputs: list  # entries: (node_id, out_index) for tracked inputs, else a constant ndarray
    attrs: dict
    outputs: list[np.ndarray]
    saved: Any = None
    name: str | None = None

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [o.shape for o in self.outputs]


def _check_finite(op: str, outs: list[np.ndarray]) -> None:
    for o in outs:
        if o.dtype.kind == "f" and not np.all(np.isfinite(o)):
            raise NonFiniteError(op)


def apply_op(name: str, inputs: Sequence[Any], attrs: dict | None = None) -> list[Tensor]:
    """Run a registered op eagerly, recording it on the active graph if needed."""
    op = _REGISTRY[name]
    attrs = dict(attrs or {})
    arrays = [as_array(x) for x in inputs]
    outs, saved = op.forward(arrays, attrs)
    if checked_mode():
        _check_finite(name, outs)
    g = current_graph()
    if g is None or not any(isinstance(x, Tensor) and x.tracked_in(g) for x in inputs):
        return [Tensor._wrap(o) for o in outs]
    refs = [x.ref if isinstance(x, Tensor) and x.tracked_in(g) else arrays[i]
            for i, x in enumerate(inputs)]
    nid = g._add(Node(name, refs, attrs, list(outs), saved))
    return [Tensor._wrap(o, g, (nid, k)) for k, o in enumerate(outs)]


def _leaf_forward(arrays, attrs):
    return [attrs["value"]], None


register_op(OpDef("leaf", _leaf_forward, None))


class Graph:
    """Append-only tape of op records. Node ids are topologically ordered."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _graph_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def _add(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value: Any, name: str | None = None, dtype: Any = None) -> Tensor:
        """Bind ``value`` as an input node of this graph."""
        arr = _freeze(np.array(as_array(value, dtype), copy=True))
        nid = self._add(Node("leaf", [], {"value": arr}, [arr], None, name))
        return Tensor._wrap(arr, self, (nid, 0))

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "leaf"]

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, leaf_values: Mapping[int, Any] | None = None) -> list[list[np.ndarray]]:
        """Re-execute every node from its recorded op; returns per-node outputs.

        ``leaf_values`` maps leaf node ids to replacement values; unspecified
        leaves keep their recorded value.
        """
        leaf_values = dict(leaf_values or {})
        results: list[list[np.ndarray]] = []
        for nid, node in enumerate(self.nodes):
            if node.op == "leaf":
                val = leaf_values.get(nid, node.outputs[0])
                results.append([as_array(val, node.outputs[0].dtype)])
                continue
            args = [results[r[0]][r[1]] if isinstance(r, tuple) else r for r in node.inputs]
            outs, _ = _REGISTRY[node.op].forward(args, dict(node.attrs))
            results.append(list(outs))
        return results


def _input_arrays(graph: Graph, node: Node) -> list[np.ndarray]:
    return [graph.nodes[r[0]].outputs[r[1]] if isinstance(r, tuple) else r for r in node.inputs]


def backward(graph: Graph, seeds: Mapping[Tensor, Any] | Iterable[tuple[Tensor, Any]],
             wrt: Iterable[Tensor] | None = None) -> dict[tuple[int, int], np.ndarray]:
    """Propagate cotangents from ``seeds`` back through ``graph``.

    Returns accumulated cotangents keyed by (node id, output index). When
    ``wrt`` is given, only nodes on a path from those tensors are visited.
    """
    items = list(seeds.items()) if isinstance(seeds, Mapping) else list(seeds)
    cots: dict[tuple[int, int], np.ndarray] = {}
    for t, c in items:
        if not t.tracked_in(graph):
            continue
        c = np.broadcast_to(as_array(c, t.dtype), t.shape)
        cots[t.ref] = cots[t.ref] + c if t.ref in cots else np.array(c)
    if not cots:
        return cots

    n = len(graph.nodes)
    if wrt is None:
        relevant = [True] * n
    else:
        relevant = [False] * n
        for t in wrt:
            if t.tracked_in(graph):
                relevant[t.ref[0]] = True
        for nid, node in enumerate(graph.nodes):
            if not relevant[nid] and any(isinstance(r, tuple) and relevant[r[0]] for r in node.inputs):
                relevant[nid] = True

    top = max(ref[0] for ref in cots)
    for nid in range(top, -1, -1):
        node = graph.nodes[nid]
        if node.op == "leaf" or not relevant[nid]:
            continue
        outs = [cots.pop((nid, k), None) for k in range(len(node.outputs))]
        if all(o is None for o in outs):
            continue
        op = _REGISTRY[node.op]
        if op.backward is None or not op.differentiable:
            continue
        needs = [isinstance(r, tuple) and relevant[r[0]]
                 and graph.nodes[r[0]].outputs[r[1]].dtype.kind == "f" for r in node.inputs]
        if not any(needs):
            continue
        outs = [np.zeros_like(node.outputs[k]) if o is None else o for k, o in enumerate(outs)]
        ctx = BackwardCtx(_input_arrays(graph, node), node.outputs, node.saved, node.attrs)
        in_cots = op.backward(ctx, outs, needs)
        for r, need, c in zip(node.inputs, needs, in_cots):
            if not need or c is None:
                continue
            cots[r] = cots[r] + c if r in cots else c
    return cots


def grad(graph: Graph, loss: Tensor, wrt: Mapping[str, Tensor] | Sequence[Tensor]):
    """Gradients of scalar ``loss`` with respect to leaf tensors ``wrt``.

    Returns a dict when ``wrt`` is a mapping, else a list in the same order.
    Parameters the loss does not depend on get explicit zero gradients.
    """
    if loss.size != 1:
        raise GradError(f"loss must be scalar, got shape {loss.shape}")
    named = isinstance(wrt, Mapping)
    targets = list(wrt.values()) if named else list(wrt)
    for t in targets:
        if not isinstance(t, Tensor) or not t.tracked_in(graph):
            raise GradError("gradient requested for a tensor not recorded on this graph")
        if t.is_integer:
            raise GradError(f"cannot differentiate with respect to integer tensor (node {t.ref[0]})")
    if loss.is_integer:
        raise GradError("loss is integer-valued")
    cots = backward(graph, {loss: 1.0}, targets) if loss.tracked_in(graph) else {}
    out = [Tensor._wrap(np.array(cots[t.ref]) if t.ref in cots else np.zeros_like(t.data))
           for t in targets]
    return dict(zip(wrt.keys(), out)) if named else out


def value_and_grad(fn: Callable, params: Mapping[str, Any], *args, **kwargs):
    """Evaluate ``fn(params, *args)`` on a fresh nested graph and differentiate it.

    Returns ``(value, grads)`` with both detached from any enclosing graph.
    Sharded parameter types may take over via ``__tensor_grad__``.
    """
    for v in params.values():
        hook = getattr(type(v), "__tensor_grad__", None)
        if hook is not None:
            return hook(fn, params, *args, **kwargs)
    with Graph() as g:
        bound = {k: g.leaf(as_array(v)) for k, v in params.items()}
        value = fn(bound, *args, **kwargs)
    grads = grad(g, value, bound)
    return value.detach(), grads
