"""Scenario configuration: JSON in, validated dataclass out.

Every scenario has desk-scale defaults (``DEFAULTS``); a config file only lists the keys it
overrides.  Unknown keys are rejected at every nesting level.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from ..exceptions import ConfigError
from ..fields import FLOWS

SCENARIOS = ("navier_stokes", "obstruction", "euler", "stokes", "temperature")
CONTROL_KINDS = ("viscosity_scale", "pressure_scale", "drift_bump")

_PI = math.pi
_NS_INITIAL = {"kind": "gaussian", "mean": [_PI / 2, _PI], "cov": [0.5, 0.5]}
_NS_PROBE = {"center": [_PI / 2, _PI], "half_width": 1.2, "n": 5}

DEFAULTS = {
    "navier_stokes": {
        "flow": "taylor_green", "nu": 0.05, "n_paths": 200_000, "dt": 1e-3, "record_every": 4,
        "initial": _NS_INITIAL, "probe": _NS_PROBE, "probe_times": [0.2, 0.5, 0.8],
        "nelson": {"h": 0.02, "bandwidth": 0.3, "t_buffer": 0.1, "pool": 0.3},
        "thresholds": {"rel": 0.02, "n_se": 3.0, "residual_rel": 0.1, "control_ratio": 5.0},
        "negative_control": {"kind": "viscosity_scale", "magnitude": 2.0},
    },
    "obstruction": {
        "flow": "taylor_green", "nu": 0.05, "n_paths": 200_000, "dt": 1e-3, "record_every": 4,
        "initial": _NS_INITIAL, "probe": _NS_PROBE, "probe_times": [0.2, 0.5, 0.8],
        "nelson": {"h": 0.02, "bandwidth": 0.3, "t_buffer": 0.1, "pool": 0.3},
        "thresholds": {"rel": 0.02, "n_se": 3.0, "residual_rel": 0.1, "control_ratio": 5.0},
        "negative_control": {"kind": "viscosity_scale", "magnitude": 0.0},
    },
    "euler": {
        "flow": "rigid_rotation", "flow_params": {"omega": 1.0}, "nu": 0.0, "n_paths": 20_000,
        "dt": 1e-3, "record_every": 1,
        "initial": {"kind": "gaussian", "mean": [1.0, 0.5], "cov": [0.1, 0.1]},
        "probe": {"center": [1.0, 0.5], "half_width": 1.0, "n": 5}, "probe_times": [0.2, 0.5, 0.8],
        "nelson": {"t_buffer": 0.05},
        "thresholds": {"rel": 1e-6, "n_se": 3.0, "scale": 1.0, "control_factor": 10.0,
                       "residual_abs": 1e-6},
        "negative_control": {"kind": "pressure_scale", "magnitude": 2.0},
    },
    "stokes": {
        "flow": "shear_mode", "nu": 0.1, "n_paths": 1_000_000, "dt": 1e-3, "record_every": 20,
        "initial": {"kind": "gaussian", "mean": [0.0, 0.0], "cov": [1.0, 1.0]},
        "probe": {"center": [0.0, 0.0], "half_width": 1.0, "n": 5}, "probe_times": [0.5],
        "nelson": {"h": 0.04, "bandwidth": 0.3, "t_buffer": 0.1, "pool": 0.0},
        "residual_nelson": {"h": 0.04, "bandwidth": 1.0, "t_buffer": 0.1, "pool": 0.4},
        "thresholds": {"rel": 0.02, "n_se": 3.0, "residual_rel": 0.05, "control_ratio": 5.0},
        "negative_control": {"kind": "drift_bump", "magnitude": 0.3},
    },
    "temperature": {
        "flow": "taylor_green", "nu": 0.05, "kappa": 0.1, "n_paths": 200_000, "dt": 1e-3,
        "record_every": 50, "initial": _NS_INITIAL, "probe_times": [0.25, 0.5, 1.0],
        "probe": {"center": [_PI / 2, _PI], "half_width": 3.0, "n": 121},
        "thresholds": {"l1": 0.05, "control_ratio": 2.0, "fp_rel": 0.25, "fp_bandwidth": 0.3},
        "fp_grid": {"spacing": 0.05, "margin": 3.0, "cfl": 0.4},
        "negative_control": {"kind": "viscosity_scale", "magnitude": 2.0},
    },
}

_NESTED_KEYS = {
    "nelson": {"h", "bandwidth", "t_buffer", "pool", "n_min", "richardson"},
    "residual_nelson": {"h", "bandwidth", "t_buffer", "pool", "n_min", "richardson"},
    "thresholds": {"rel", "n_se", "fail_factor", "residual_rel", "residual_abs", "control_ratio",
                   "control_factor", "scale", "l1", "fp_rel", "fp_bandwidth"},
    "probe": {"center", "half_width", "n"},
    "negative_control": {"kind", "magnitude"},
    "variations": {"eps", "modes", "bridges"},
    "fp_grid": {"spacing", "margin", "cfl"},
}


@dataclass
class ScenarioConfig:
    """Validated scenario settings (see ``DEFAULTS`` for what each scenario uses)."""

    scenario: str
    flow: str = "taylor_green"
    flow_params: dict = field(default_factory=dict)
    nu: float = 0.05
    kappa: float = 0.1
    n_paths: int = 200_000
    dt: float = 1e-3
    T: float = 1.0
    seed: int = 0
    mu: Optional[float] = None
    record_every: int = 1
    initial: Optional[dict] = None
    probe: dict = field(default_factory=dict)
    probe_times: list = field(default_factory=list)
    nelson: dict = field(default_factory=dict)
    residual_nelson: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    variations: dict = field(default_factory=lambda: {"eps": 0.1, "modes": [1, 2, 3, 4], "bridges": 4})
    negative_control: Optional[dict] = None
    fp_grid: dict = field(default_factory=dict)
    dump: bool = False
    max_dump_paths: int = 1000

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.flow not in FLOWS:
            raise ConfigError(f"unknown flow {self.flow!r}")
        if self.nu < 0 or self.kappa < 0:
            raise ConfigError("nu and kappa must be non-negative")
        if self.n_paths < 2:
            raise ConfigError("n_paths must be at least 2")
        if not (self.dt > 0 and self.T > 0):
            raise ConfigError("dt and T must be positive")
        if self.record_every < 1:
            raise ConfigError("record_every must be positive")
        if self.mu is not None and self.mu not in (-1, 0, 1):
            raise ConfigError("mu must be -1, 0 or 1")
        nc = self.negative_control
        if nc is None or nc.get("kind") not in CONTROL_KINDS:
            raise ConfigError(f"negative_control.kind must be one of {CONTROL_KINDS}")
        if self.scenario in ("navier_stokes", "obstruction", "stokes") and self.nu <= 0:
            raise ConfigError(f"{self.scenario} needs nu > 0")
        if self.scenario == "obstruction" and self.negative_control.get("magnitude") != 0:
            raise ConfigError("the obstruction control is the sigma = 0 limit (magnitude 0)")

    @property
    def sigma(self):
        """Diffusion coefficient ``sqrt(2 nu)``."""
        return math.sqrt(2 * self.nu)

    def to_dict(self):
        return asdict(self)

    def flow_kwargs(self):
        params = dict(self.flow_params)
        if "nu" in FLOWS[self.flow][1]:
            params.setdefault("nu", self.nu)
        return params


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(data):
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, allowed in _NESTED_KEYS.items():
        sub = data.get(key)
        if sub is None:
            continue
        if not isinstance(sub, dict):
            raise ConfigError(f"{key} must be an object")
        bad = set(sub) - allowed
        if bad:
            raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")


def make_config(scenario, overrides=None, seed=None) -> ScenarioConfig:
    """Defaults of ``scenario`` updated with ``overrides`` (nested dicts are merged)."""
    overrides = dict(overrides or {})
    if "scenario" in overrides and overrides.pop("scenario") != scenario:
        raise ConfigError("config file names a different scenario")
    if scenario not in DEFAULTS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    _check_keys(overrides)
    base = DEFAULTS[scenario]
    if overrides.get("flow", base["flow"]) != base["flow"]:
        # parameters of the default flow mean nothing for another one
        base = {k: v for k, v in base.items() if k != "flow_params"}
    data = _merge(base, overrides)
    if seed is not None:
        data["seed"] = int(seed)
    try:
        return ScenarioConfig(scenario=scenario, **data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, scenario=None, seed=None) -> ScenarioConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    scenario = scenario or data.get("scenario")
    if scenario is None:
        raise ConfigError("config does not name a scenario")
    return make_config(scenario, data, seed)
