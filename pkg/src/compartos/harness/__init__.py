"""User surface: sessions, scenarios, benchmarks, graphs and the CLI."""

from .bench import BenchmarkReport, Row, run_bench
from .graph import to_dot, to_text
from .scenario import Scenario, ScenarioError, VariantResult
from .session import Session, resolve_scenario, scenarios_root

__all__ = [name for name in dir() if not name.startswith("_")]
