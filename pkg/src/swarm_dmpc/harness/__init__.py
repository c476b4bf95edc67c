"""Scenario loading, closed-loop simulation, and solver comparison."""
from .scenario import (PushEvent, Scenario, ScenarioError, from_dict, load_scenario,
                       packaged_scenarios, parse_override)
from .report import ComparisonReport, RunSummary, compare, safety_violations, summarize
from .simulate import (SimResult, Simulation, StepLog, read_log, run, write_csv, write_log,
                       write_timings)

__all__ = [
    "PushEvent", "Scenario", "ScenarioError", "from_dict", "load_scenario", "packaged_scenarios",
    "parse_override", "SimResult", "Simulation", "StepLog", "read_log", "run", "write_csv",
    "write_log", "write_timings", "ComparisonReport", "RunSummary", "compare",
    "safety_violations", "summarize",
]
