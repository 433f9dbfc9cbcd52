"""meshplan: two-level auto-parallelization planner for dataflow graphs on
2-D device clusters.

An intra-operator ILP picks per-operator sharding strategies on a logical
device mesh; an inter-operator DP slices the graph into pipeline stages mapped
to submeshes; a discrete-event simulator validates the predicted end-to-end
latency.
"""
from .costs import CostModel, MemoryReport, StageCostReport
from .graph import (OpGraph, OpKind, OpNode, TensorShape, build_mlp,
                    build_transformer_blocks, parse, serialize)
from .inter import (InfeasiblePlanError, LayerClustering, PipelinePlan,
                    cluster_operators, plan, sweep_microbatches)
from .intra import (IntraPlan, StrategyTable, build_ilp, evaluate_stage,
                    export_lp, extract_stage, merge_trivial, post_ilp_rewrite,
                    solve_ilp)
from .mesh import (ClusterMesh, LogicalMesh, SubmeshAssignment, SubmeshShape,
                   admissible_shapes, cover, logical_views, verify_cover)
from .planio import cluster_from_json, plan_json_text, plan_to_json, runtime_from_json, runtime_from_plan
from .reshard import (CrossMeshPlan, Instruction, Program, RuntimePlan,
                      cross_mesh_plan, emit_instructions, materialization_ok)
from .sharding import (Collective, DimSharding, ParallelAlgorithm, ShardingSpec,
                       enumerate_algorithms, format_spec, parse_spec,
                       resharding_cost)
from .sim import SimError, SimResult, simulate

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
