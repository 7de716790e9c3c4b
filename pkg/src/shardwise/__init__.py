"""Tensor-parallel training on a simulated device mesh."""
from shardwise import ops
from shardwise.mesh import CommReport, DeviceMesh, ShardedTensor, build_mesh, comm_report
from shardwise.partition import REPLICATED, Replicated, Split
from shardwise.shardplan import ShardingPlan, derive_plan, infer_roles, plan_for
from shardwise.spmd import DistTensor, TrainState, shard_params, gather_params
from shardwise.tensor import Graph, Tensor, grad, value_and_grad

__version__ = "0.1.0"

__all__ = [
    "CommReport", "DeviceMesh", "DistTensor", "Graph", "REPLICATED", "Replicated", "ShardedTensor",
    "ShardingPlan", "Split", "Tensor", "TrainState", "build_mesh", "comm_report", "derive_plan",
    "gather_params", "grad", "infer_roles", "ops", "plan_for", "shard_params", "value_and_grad",
]
