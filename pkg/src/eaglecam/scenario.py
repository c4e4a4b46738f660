"""Scenario files: YAML documents flattened to dotted keys over a table of defaults."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import yaml

from .faults import FaultEntry


class ConfigInvalid(ValueError):
    pass


# key -> (default, type, (lo, hi) or None). ``None`` bounds mean "any value of the type".
_NUM = (int, float)
SCHEMA: dict[str, tuple[Any, Any, Optional[tuple]]] = {
    "seed": (42, int, (0, 2**63 - 1)),
    "links.wifi.bandwidth_bps": (20_000_000, _NUM, (1, None)),
    "links.wifi.latency_us": (2_000, int, (0, None)),
    "links.wifi.loss": (0.01, _NUM, (0.0, 1.0)),
    "links.eth.bandwidth_bps": (100_000_000, _NUM, (1, None)),
    "links.eth.latency_us": (200, int, (0, None)),
    "links.eth.loss": (0.0, _NUM, (0.0, 1.0)),
    "gravity_mps2": (1.62, _NUM, (1e-6, None)),
    "descent.start_altitude_m": (100.0, _NUM, (1e-6, None)),
    "descent.rate_mps": (1.5, _NUM, (1e-6, None)),
    "descent.dt_ms": (10, int, (1, None)),
    "eject.capture_alt_m": (50.0, _NUM, (1e-6, None)),
    "eject.deploy_alt_m": (30.0, _NUM, (1e-6, None)),
    "eject.v0_mps": (0.0, _NUM, (0.0, None)),
    "eject.horizontal_mps": (0.0, _NUM, None),
    "eject.signal_delay_ms": (100, int, (0, None)),
    "eject.freefall_dt_ms": (1, int, (1, None)),
    "power_on_s": (0.0, _NUM, (0.0, None)),
    "eaglecam.boot_delay_s": (3.0, _NUM, (0.0, None)),
    "imu.rate_hz": (40.0, _NUM, (1e-3, None)),
    "imu.buffer_capacity": (65536, int, (1, None)),
    "imu.batch_size": (40, int, (1, 1000)),
    "imu.spike_accel_mps2": (120.0, _NUM, (0.0, None)),
    "imu.spike_ms": (75, int, (0, None)),
    "imu.blind": (False, bool, None),
    "landing.spike_threshold_mps2": (30.0, _NUM, (0.0, None)),
    "landing.consecutive": (2, int, (1, None)),
    "landing.fallback_s": (10.0, _NUM, (0.0, None)),
    "nisa.fps": (5.0, _NUM, (1e-3, 1000.0)),
    "nisa.frame_kib": (512, _NUM, (1, 16384)),
    "nisa.usb_mbps": (40.0, _NUM, (1e-3, None)),
    "nisa.live_per_wakeup": (1, int, (0, 3)),
    "nisa.trigger_failures": (0, int, (0, None)),
    "arducam.frame_kib": (256, _NUM, (1, 16384)),
    "arducam.pre_count": (3, int, (0, None)),
    "arducam.post_count": (3, int, (0, None)),
    "arducam.pre_capture_delay_s": (8.0, _NUM, (0.0, None)),
    "arducam.eds_timeout_s": (60.0, _NUM, (0.0, None)),
    "arducam.init_fail": (False, bool, None),
    "dust.settle": (0.8, _NUM, (0.0, 1.0)),
    "dust.settle_window_s": (5.0, _NUM, (0.0, None)),
    "dust.removal_rate": (0.2, _NUM, (0.0, None)),
    "eds.activation_delay_s": (40.0, _NUM, (0.0, None)),
    "eds.active_s": (15.0, _NUM, (0.0, None)),
    "battery.discharge_pct_per_min": (1.0, _NUM, (0.0, None)),
    "wifi.probe_period_s": (1.0, _NUM, (0.005, None)),
    "wifi.probe_timeout_ms": (500, _NUM, (0, None)),
    "wifi.chip_fail_s": (None, _NUM, (0.0, None)),
    "novac.max_retries": (20, int, (0, None)),
    "novac.battery_stale_s": (3.0, _NUM, (0.0, None)),
    "sync.period_s": (1.0, _NUM, (0.005, None)),
    "sync.pace_ms": (50, int, (5, None)),
    "sync.max_backlog_ms": (100, int, (1, None)),
    "sched.base_tick_us": (5_000, int, (1, None)),
    "sched.pipe_depth": (16, int, (1, None)),
    "sched.imu_pipe_depth": (64, int, (1, None)),
    "run.max_duration_s": (300.0, _NUM, (0.001, 86_400.0)),
    "run.stop_when_quiet": (True, bool, None),
    "run.quiet_grace_s": (2.0, _NUM, (0.0, None)),
}

DEFAULTS = {k: v[0] for k, v in SCHEMA.items()}
NODES = ("eaglecam", "deployer")
LINKS = ("wifi", "eth")


@dataclass
class Scenario:
    """Fully resolved configuration: every schema key present, plus the fault plan."""

    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    faults: list = field(default_factory=list)  # raw fault dicts, echoed in reports
    source: Optional[str] = None

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def fault_plan(self) -> list[FaultEntry]:
        return [FaultEntry.from_config(f) for f in self.faults]

    def with_overrides(self, overrides: Union[dict, Iterable[str]]) -> Scenario:
        raw = self.as_dict()
        if not isinstance(overrides, dict):
            overrides = parse_overrides(overrides)
        for key, value in overrides.items():
            if key == "faults":
                raw["faults"] = value
            else:
                raw[key] = value
        return build_scenario(raw, self.source)

    def as_dict(self) -> dict:
        out = dict(self.values)
        out["faults"] = copy.deepcopy(self.faults)
        return out


def flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in doc.items():
        if not isinstance(key, str):
            raise ConfigInvalid(f"non-string key {key!r}")
        name = f"{prefix}{key}"
        if isinstance(value, dict) and name != "faults":
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _check(key: str, value: Any) -> Any:
    default, typ, bounds = SCHEMA[key]
    if value is None:
        if default is None:
            return None
        raise ConfigInvalid(f"{key}: value required")
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigInvalid(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, typ if isinstance(typ, tuple) else (typ,)):
        if typ is int and isinstance(value, float) and value.is_integer():
            value = int(value)
        else:
            raise ConfigInvalid(f"{key}: expected {getattr(typ, '__name__', 'number')}, got {value!r}")
    if bounds is not None:
        lo, hi = bounds
        if (lo is not None and value < lo) or (hi is not None and value > hi):
            raise ConfigInvalid(f"{key}: {value!r} outside [{lo}, {hi if hi is not None else 'inf'}]")
    return value


def build_scenario(raw: dict, source: Optional[str] = None) -> Scenario:
    flat = flatten(raw)
    faults = flat.pop("faults", None) or []
    unknown = sorted(set(flat) - set(SCHEMA))
    if unknown:
        raise ConfigInvalid(f"unknown keys: {', '.join(unknown)}")
    values = dict(DEFAULTS)
    for key, value in flat.items():
        values[key] = _check(key, value)
    if not values["eject.capture_alt_m"] > values["eject.deploy_alt_m"]:
        raise ConfigInvalid("eject.capture_alt_m must exceed eject.deploy_alt_m")
    if not isinstance(faults, list):
        raise ConfigInvalid("faults must be a list")
    for i, f in enumerate(faults):
        if not isinstance(f, dict):
            raise ConfigInvalid(f"faults[{i}] must be a mapping")
        try:
            entry = FaultEntry.from_config(f)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigInvalid(f"faults[{i}]: {exc}") from None
        known = NODES if entry.action.value == "node_crash" else LINKS
        if entry.target not in known:
            raise ConfigInvalid(f"faults[{i}]: unknown target {entry.target!r}")
    return Scenario(values, copy.deepcopy(faults), source)


def parse_overrides(items: Iterable[str]) -> dict:
    out = {}
    for item in items:
        key, sep, text = item.partition("=")
        if not sep or not key.strip():
            raise ConfigInvalid(f"override {item!r} is not key=value")
        try:
            out[key.strip()] = yaml.safe_load(text) if text.strip() else None
        except yaml.YAMLError as exc:
            raise ConfigInvalid(f"override {item!r}: {exc}") from None
    return out


def load_scenario(path: Union[str, Path], overrides: Iterable[str] = ()) -> Scenario:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigInvalid(f"{path}: top level must be a mapping")
    scenario = build_scenario(doc, str(path))
    items = list(overrides)
    return scenario.with_overrides(items) if items else scenario


def default_scenario(**overrides: Any) -> Scenario:
    """Defaults with keyword overrides; dots in keys are spelled as double underscores."""
    return build_scenario({k.replace("__", "."): v for k, v in overrides.items()})
