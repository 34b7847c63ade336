"""Conditional early-exit toolkit: branch costs, guiding patch database, quality predictor, threshold routing."""

from exitlab.cost_model import (
    Branch,
    CostReport,
    ModuleSpec,
    RouteGraph,
    ScalePolicy,
    build_branch_schedule,
    build_route_graph,
    cost_report,
    flops_of_module,
    route_cost,
    savings_slope,
    scale_channels,
)
from exitlab.difficulty_sim import OracleConfig, QualityOracle
from exitlab.errors import ExitLabError
from exitlab.predictor import Mlp, TrainConfig, train
from exitlab.router import RoutingPolicy, select_exit, sweep

__version__ = "0.1.0"

__all__ = [
    "Branch",
    "CostReport",
    "ExitLabError",
    "Mlp",
    "ModuleSpec",
    "OracleConfig",
    "QualityOracle",
    "RouteGraph",
    "RoutingPolicy",
    "ScalePolicy",
    "TrainConfig",
    "build_branch_schedule",
    "build_route_graph",
    "cost_report",
    "flops_of_module",
    "route_cost",
    "savings_slope",
    "scale_channels",
    "select_exit",
    "sweep",
    "train",
]
