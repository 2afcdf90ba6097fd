"""Scenario lab: configs, runners, reports and the ``slab`` command line."""
from .config import DEFAULTS, SCENARIOS, ScenarioConfig, load_config, make_config
from .report import EXIT_CODES, Check, ScenarioReport
from .scenarios import RUNNERS, run_scenario

__all__ = ["DEFAULTS", "SCENARIOS", "ScenarioConfig", "load_config", "make_config", "EXIT_CODES",
           "Check", "ScenarioReport", "RUNNERS", "run_scenario"]
