"""Deterministic simulator and control plane for per-service security
inspection chains with elastic middlebox groups and many-to-one hot standby."""

from .harness import ScenarioResult, compare, query_logs, run_scenario
from .simengine import Simulation
from .topology import ScenarioConfig, parse_config

__all__ = ["ScenarioConfig", "ScenarioResult", "Simulation", "compare", "parse_config",
           "query_logs", "run_scenario"]
