"""Merge independently trained graph neural networks by aligning node embeddings."""

from .engine import GnnModel, LayerSpec, forward, init_model, load_model, save_model
from .errors import (
    ConfigurationError,
    FormatError,
    GnnMergeError,
    IncompatibilityError,
    NumericError,
    OptimizationError,
    ParameterError,
    ShapeError,
    SingularityError,
)
from .evaluation import EvalReport, accuracy, bench_merge, evaluate_merged, export_embeddings, roc_auc
from .graph import (
    Graph,
    disjoint_label_split,
    from_edges,
    generate_sbm,
    link_split,
    load_graph,
    node_split,
    save_graph,
)
from .merge import (
    MergeConfig,
    analytical_merge,
    collect_statistics,
    iterative_merge,
    joint_merge,
    weight_average,
)
from .reduction import MergeDomain, condense_one_hop, sample_targets
from .trainer import TaskSpec, TrainConfig, grad_check, load_task, save_task, train

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "EvalReport",
    "FormatError",
    "GnnMergeError",
    "GnnModel",
    "Graph",
    "IncompatibilityError",
    "LayerSpec",
    "MergeConfig",
    "MergeDomain",
    "NumericError",
    "OptimizationError",
    "ParameterError",
    "ShapeError",
    "SingularityError",
    "TaskSpec",
    "TrainConfig",
    "accuracy",
    "analytical_merge",
    "bench_merge",
    "collect_statistics",
    "condense_one_hop",
    "disjoint_label_split",
    "evaluate_merged",
    "export_embeddings",
    "forward",
    "from_edges",
    "generate_sbm",
    "grad_check",
    "init_model",
    "iterative_merge",
    "joint_merge",
    "link_split",
    "load_graph",
    "load_model",
    "load_task",
    "node_split",
    "roc_auc",
    "sample_targets",
    "save_graph",
    "save_model",
    "save_task",
    "train",
    "weight_average",
]
