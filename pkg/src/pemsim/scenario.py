"""Scenario files: schema, loading, and fleet construction.

Scenarios are YAML documents validated against ``SCENARIO_SCHEMA`` (JSON
Schema). Every random quantity derives from the scenario's master seed.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .devices import DeviceClass, DeviceParams, DrawParams

_DIST = {
    "oneOf": [
        {"type": "number"},
        {"type": "object", "required": ["mean"], "additionalProperties": False,
         "properties": {"mean": {"type": "number"}, "std": {"type": "number", "minimum": 0}}},
    ]
}
_DELAY = {
    "oneOf": [
        {"type": "number", "minimum": 0},
        {"type": "object", "additionalProperties": False,
         "properties": {
             "family": {"enum": ["zero", "constant", "normal", "exponential", "uniform", "empirical"]},
             "mean": {"type": "number"}, "std": {"type": "number", "minimum": 0},
             "samples": {"type": "array", "items": {"type": "number"}}}},
    ]
}

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "pemsim scenario",
    "type": "object",
    "required": ["name", "duration", "fleet", "reference"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "duration": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "time_mode": {"enum": ["VIRTUAL", "REAL_TIME"]},
        "speedup": {"type": ["number", "null"], "minimum": 1},
        "device_dt": {"type": "number", "exclusiveMinimum": 0},
        "warmup": {"type": "number", "minimum": 0},
        "record_period": {"type": "number", "exclusiveMinimum": 0},
        "fleet": {
            "type": "object",
            "required": ["groups"],
            "additionalProperties": False,
            "properties": {
                "initial": {"enum": ["stationary", "uniform", "setpoint"]},
                "groups": {
                    "type": "array", "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["count", "device_class"],
                        "additionalProperties": False,
                        "properties": {
                            "name": {"type": "string"},
                            "count": {"type": "integer", "minimum": 1},
                            "device_class": {"enum": ["EWH", "ESS"]},
                            "charge_power": _DIST,
                            "discharge_power": _DIST,
                            "tank_liters": _DIST,
                            "capacity_kwh": _DIST,
                            "efficiency": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                            "setpoint": {"type": "number"},
                            "deadband": {"type": "array", "items": {"type": "number"},
                                         "minItems": 2, "maxItems": 2},
                            "mean_time_to_request": {"type": "number", "exclusiveMinimum": 0},
                            "packet_charge": _DIST,
                            "packet_discharge": _DIST,
                            "draw": {
                                "type": ["object", "null"], "additionalProperties": False,
                                "properties": {
                                    "pulse_rate": {"type": "number", "minimum": 0},
                                    "mean_energy": {"type": "number", "minimum": 0},
                                    "energy_cv": {"type": "number", "minimum": 0},
                                    "flow_power": {"type": "number", "exclusiveMinimum": 0}}},
                        },
                    },
                },
            },
        },
        "reference": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["baseline", "steps", "file", "grid"]},
                "steps": {"type": "array", "items": {
                    "type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}},
                "file": {"type": "string"},
                "scale": {"type": "number"},
                "offset": {"type": "number"},
                "relative_to_baseline": {"type": "boolean"},
            },
        },
        "channel": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "base_latency": _DELAY,
                "loss_probability": {"type": "number", "minimum": 0, "maximum": 1},
                "measurement_delay_probability": {"type": "number", "minimum": 0, "maximum": 1},
                "measurement_delay": _DELAY,
                "input_delay": _DELAY,
                "measurement_ordering": {"enum": ["fifo", "unordered"]},
            },
        },
        "coordinator": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "policy": {"enum": ["MEASURED", "RECONSTRUCTED", "BLEND"]},
                "rule": {"enum": ["strict", "literal"]},
                "threshold_charge": {"type": "number"},
                "threshold_discharge": {"type": "number"},
                "base_load": {"type": "number"},
                "meter_period": {"type": "number", "exclusiveMinimum": 0},
                "response_timeout": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "estimator": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "n_bins": {"type": "integer", "minimum": 2},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "use_optout": {"type": "boolean"},
                "demand_fraction": {"type": "number", "exclusiveMinimum": 0},
                "process": {"type": "number", "exclusiveMinimum": 0},
                "count_dispersion": {"type": "number", "exclusiveMinimum": 0},
                "count_relative": {"type": "number", "minimum": 0},
                "expiry_shape": {"enum": ["uniform", "fixed", "adaptive"]},
                "checkpoints": {"type": "array", "items": {"type": "number"}},
            },
        },
        "grid": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "dt": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.1},
                "agc": {"type": "boolean"},
                "der_scale": {"type": "number", "exclusiveMinimum": 0},
                "solar_file": {"type": "string"},
                "solar_scale": {"type": "number"},
                "solar_start": {"type": "number", "minimum": 0},
                "solar_step": {"type": "object", "additionalProperties": False,
                               "required": ["time", "mw"],
                               "properties": {"time": {"type": "number"}, "mw": {"type": "number"}}},
                "record_period": {"type": "number", "exclusiveMinimum": 0},
                "params": {"type": "object"},
            },
        },
        "metrics": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "step_transient": {"type": "number", "minimum": 0},
                "reconstruction": {"type": "boolean"},
            },
        },
    },
}


class ScenarioError(ValueError):
    pass


def validate(data: dict) -> dict:
    """Schema check plus the semantic rules the schema cannot express."""
    try:
        jsonschema.validate(data, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"{where}: {exc.message}") from None
    for i, g in enumerate(data["fleet"]["groups"]):
        if "deadband" in g:
            lo, hi = g["deadband"]
            sp = g.get("setpoint", (lo + hi) / 2)
            if not lo < sp < hi:
                raise ScenarioError(f"fleet/groups/{i}: setpoint must lie inside the deadband")
        if g["device_class"] == "EWH" and "capacity_kwh" in g:
            raise ScenarioError(f"fleet/groups/{i}: capacity_kwh applies to ESS only")
    ref = data["reference"]
    if ref["kind"] == "steps" and not ref.get("steps"):
        raise ScenarioError("reference: kind 'steps' needs a steps list")
    if ref["kind"] == "file" and not ref.get("file"):
        raise ScenarioError("reference: kind 'file' needs a file")
    if ref["kind"] == "grid" and not data.get("grid", {}).get("enabled", False):
        raise ScenarioError("reference: kind 'grid' needs grid.enabled = true")
    est = data.get("estimator", {})
    if est.get("enabled") and len(data["fleet"]["groups"]) != 1:
        raise ScenarioError("estimator: needs a single homogeneous device group")
    return data


def load(path: str | Path) -> dict:
    path = Path(path)
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: not a mapping")
    data = validate(data)
    data = copy.deepcopy(data)
    data["_base_dir"] = str(path.parent)
    return data


def resolve(data: dict, relative: str) -> Path:
    p = Path(relative)
    if p.is_absolute():
        return p
    return Path(data.get("_base_dir", ".")) / p


@dataclass
class GroupSpec:
    name: str
    start: int
    stop: int
    mean_params: DeviceParams

    @property
    def count(self) -> int:
        return self.stop - self.start

    @property
    def members(self) -> np.ndarray:
        return np.arange(self.start, self.stop)


_PER_DEVICE = ("mean_time_to_request", "packet_charge", "packet_discharge")


def _sample(spec, count, rng, default):
    """Draw ``count`` values; normal draws are truncated to positive values."""
    if spec is None:
        spec = default
    if isinstance(spec, (int, float)):
        return np.full(count, float(spec))
    mean, std = float(spec["mean"]), float(spec.get("std", 0.0))
    if std == 0:
        return np.full(count, mean)
    out = rng.normal(mean, std, count)
    bad = out <= 0
    while bad.any():
        out[bad] = rng.normal(mean, std, bad.sum())
        bad = out <= 0
    return out


def _mean(spec, default):
    if spec is None:
        spec = default
    return float(spec) if isinstance(spec, (int, float)) else float(spec["mean"])


def build_params(data: dict, rng: np.random.Generator):
    """Per-device parameter list and group index ranges."""
    params: list[DeviceParams] = []
    groups: list[GroupSpec] = []
    for i, g in enumerate(data["fleet"]["groups"]):
        cls = DeviceClass(g["device_class"])
        count = g["count"]
        mean_extra = {k: _mean(g[k], None) for k in _PER_DEVICE if k in g}
        drawn = {k: _sample(g[k], count, rng, None) for k in _PER_DEVICE if k in g}
        if cls is DeviceClass.EWH:
            deadband = tuple(g.get("deadband", (48.9, 55.1)))
            setpoint = g.get("setpoint", 52.0)
            draw = DrawParams(**g["draw"]) if g.get("draw") else DrawParams()
            power = _sample(g.get("charge_power"), count, rng, 4.5)
            liters = _sample(g.get("tank_liters"), count, rng, 275.0)
            efficiency = g.get("efficiency", 1.0)
            for j, (p, l) in enumerate(zip(power, liters)):
                extra = {k: float(v[j]) for k, v in drawn.items()}
                params.append(DeviceParams.ewh(p, l, setpoint, deadband, draw=draw,
                                               charge_efficiency=efficiency, **extra))
            mean = DeviceParams.ewh(_mean(g.get("charge_power"), 4.5), _mean(g.get("tank_liters"), 275.0),
                                    setpoint, deadband, draw=draw, charge_efficiency=efficiency, **mean_extra)
        else:
            deadband = tuple(g.get("deadband", (55.0, 95.0)))
            setpoint = g.get("setpoint", 75.0)
            power = _sample(g.get("charge_power"), count, rng, 5.0)
            cap = _sample(g.get("capacity_kwh"), count, rng, 13.5)
            efficiency = g.get("efficiency", 1.0)
            for j, (p, c) in enumerate(zip(power, cap)):
                extra = {k: float(v[j]) for k, v in drawn.items()}
                params.append(DeviceParams.ess(p, c, setpoint, deadband, efficiency, **extra))
            mean = DeviceParams.ess(_mean(g.get("charge_power"), 5.0), _mean(g.get("capacity_kwh"), 13.5),
                                    setpoint, deadband, efficiency, **mean_extra)
        start = len(params) - count
        groups.append(GroupSpec(g.get("name", f"group{i}"), start, len(params), mean))
    return params, groups
