"""Scenarios, closed-loop runs, benchmark, reports and the CLI."""

from .closedloop import demand_follower, prepare, run_closed_loop
from .scenario import ScenarioConfig, load_scenario, synth_demand

__all__ = ["ScenarioConfig", "demand_follower", "load_scenario", "prepare", "run_closed_loop",
           "synth_demand"]
