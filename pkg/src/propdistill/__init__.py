"""GNN-to-MLP knowledge distillation with propagation-aware losses."""

from .graph import Graph, NormAdj, build_graph, normalize_adjacency
from .propagation import (
    PropagationSpec,
    clamp_renormalize,
    conv_operator,
    inverse_operator,
    ppr_exact,
    propagate_recursive,
    propagate_recursive_fix,
)
from .distill import DistillConfig, TeacherConfig, distill_student, evaluate, production_eval, train_teacher

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "NormAdj",
    "build_graph",
    "normalize_adjacency",
    "PropagationSpec",
    "clamp_renormalize",
    "conv_operator",
    "inverse_operator",
    "ppr_exact",
    "propagate_recursive",
    "propagate_recursive_fix",
    "DistillConfig",
    "TeacherConfig",
    "distill_student",
    "evaluate",
    "production_eval",
    "train_teacher",
]
