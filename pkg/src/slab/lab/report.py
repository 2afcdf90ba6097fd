"""Scenario reports: per-check results, overall verdict and deterministic JSON output."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

from ..action import _jsonable, config_hash

EXIT_CODES = {"pass": 0, "fail": 1, "config_error": 2, "inconclusive": 3}


@dataclass
class Check:
    """One numerical check.

    ``role`` is ``"mandatory"`` (must hold) or ``"control"`` (a perturbed run that must be
    rejected; ``passed`` then means the rejection happened).  ``status`` is ``"ok"`` unless
    the quantity could not be estimated, in which case the check is inconclusive.
    """

    name: str
    value: Optional[float]
    tolerance: Optional[float]
    passed: bool
    role: str = "mandatory"
    stderr: Optional[float] = None
    relation: str = "<="
    status: str = "ok"
    detail: dict = field(default_factory=dict)


@dataclass
class ScenarioReport:
    scenario: str
    config: dict
    seed: int
    statement: str = ""
    checks: list = field(default_factory=list)
    action_reports: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def config_hash(self):
        return config_hash(self.config)

    def add(self, check: Check):
        self.checks.append(check)
        return check

    @property
    def verdict(self):
        if any(c.status != "ok" for c in self.checks):
            return "inconclusive"
        return "pass" if self.checks and all(c.passed for c in self.checks) else "fail"

    @property
    def exit_code(self):
        return EXIT_CODES[self.verdict]

    def to_dict(self):
        data = asdict(self)
        data["config_hash"] = self.config_hash
        data["verdict"] = self.verdict
        return _jsonable(data)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "report.json")
        with open(path, "w") as fh:
            fh.write(self.to_json())
        return path

    def summary_lines(self):
        lines = [f"{self.scenario}: {self.verdict.upper()} (config {self.config_hash}, seed {self.seed})"]
        for c in self.checks:
            mark = "PASS" if c.passed else ("INCONCLUSIVE" if c.status != "ok" else "FAIL")
            val = "n/a" if c.value is None else f"{c.value:.4g}"
            tol = "n/a" if c.tolerance is None else f"{c.tolerance:.4g}"
            lines.append(f"  [{mark}] {c.role:9s} {c.name}: {val} {c.relation} {tol}")
        return lines
