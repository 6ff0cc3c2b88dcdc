"""Scenario orchestration, baselines, metrics and the command line."""

from .config import ScenarioConfig, load_config, validate
from .metrics import HEADER, MetricsRow, emit_metrics, read_metrics
from .runner import RunResult, run_asynfl, run_chainfl, run_fedavg, run_scenario

__all__ = [
    "HEADER",
    "MetricsRow",
    "RunResult",
    "ScenarioConfig",
    "emit_metrics",
    "load_config",
    "read_metrics",
    "run_asynfl",
    "run_chainfl",
    "run_fedavg",
    "run_scenario",
    "validate",
]
