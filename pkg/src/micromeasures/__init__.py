"""Metapopulation SIR simulation with mobility learned from call traces and
individual-level mitigation strategies."""

__version__ = "0.1.0"

from .communities import CommunityAssignment, MobilityGraph, build_graph, louvain, modularity  # noqa: E402
from .epidemic import EpidemicParams, PopulationSetup, RunRecord, run  # noqa: E402
from .metrics import MetricsReport, compute_metrics, ensemble_metrics  # noqa: E402
from .mobility import ModelKind, MobilityModel, evaluate, fit, infer_homes, predict  # noqa: E402
from .strategies import StrategyConfig, StrategyKind  # noqa: E402
from .trace import Trace, filter_users, generate_trace, parse_trace, split_train_test  # noqa: E402

__all__ = [
    "CommunityAssignment", "EpidemicParams", "MetricsReport", "MobilityGraph", "MobilityModel",
    "ModelKind", "PopulationSetup", "RunRecord", "StrategyConfig", "StrategyKind", "Trace",
    "build_graph", "compute_metrics", "ensemble_metrics", "evaluate", "filter_users", "fit",
    "generate_trace", "infer_homes", "louvain", "modularity", "parse_trace", "predict", "run",
    "split_train_test",
]
