"""Adaptive video streaming simulator with (m,k)-firm frame shedding."""
from .config import ALL_STRATEGIES, ConfigError, ExperimentPlan, SimConfig, Strategy, parse_config, serialize_config
from .experiment import emit_summary, run_experiment, run_replicates
from .sim_engine import MetricsSample, RunResult, simulate

__all__ = [
    "ALL_STRATEGIES", "ConfigError", "ExperimentPlan", "SimConfig", "Strategy", "parse_config",
    "serialize_config", "emit_summary", "run_experiment", "run_replicates",
    "MetricsSample", "RunResult", "simulate",
]
__version__ = "0.1.0"
