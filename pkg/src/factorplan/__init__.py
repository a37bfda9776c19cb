"""Desk-scale object rearrangement: simulators, entity extraction, factorized
transition-graph planning, baselines, and an evaluation harness."""

__version__ = "0.1.0"

from .env import Action, EnvConfig, Environment, EnvState, Raster, Task
from .graph import (
    DistanceMetric,
    ExperienceBuffer,
    GraphConfig,
    GraphMetrics,
    TransitionGraph,
    build_graph,
)
from .controller import ControllerConfig, Diagnostics, align, select_action
from .perception import EntitySet, Perception, check_filter_criteria
from .harness import (
    EvalArtifacts,
    EvalReport,
    EvalSpec,
    bfs_oracle,
    combinatorial_size,
    evaluate,
    fractional_success,
    generate_buffer,
    sweep,
)

__all__ = [
    "Action",
    "ControllerConfig",
    "Diagnostics",
    "DistanceMetric",
    "EntitySet",
    "EnvConfig",
    "EnvState",
    "Environment",
    "EvalArtifacts",
    "EvalReport",
    "EvalSpec",
    "ExperienceBuffer",
    "GraphConfig",
    "GraphMetrics",
    "Perception",
    "Raster",
    "Task",
    "TransitionGraph",
    "align",
    "bfs_oracle",
    "build_graph",
    "check_filter_criteria",
    "combinatorial_size",
    "evaluate",
    "fractional_success",
    "generate_buffer",
    "select_action",
    "sweep",
]
