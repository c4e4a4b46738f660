"""Fault plans: link partitions, loss changes, node crashes, applied at times or mission events."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional, Union

from .kernel import SimKernel, us
from .links import LinkModel

# Mission events a fault may be pinned to.
MISSION_EVENTS = ("power_on", "start_capture", "deployed", "eject", "impact", "landed", "touchdown")


class UnknownTarget(KeyError):
    pass


class FaultAction(Enum):
    LINK_DOWN = "link_down"
    LINK_UP = "link_up"
    NODE_CRASH = "node_crash"
    LOSS_RATE_SET = "loss_rate_set"


@dataclass(frozen=True)
class FaultEntry:
    at: Union[int, str]  # sim time in us, or a mission event name
    action: FaultAction
    target: str
    value: Optional[float] = None
    delay: int = 0

    @classmethod
    def from_config(cls, raw: dict) -> FaultEntry:
        unknown = set(raw) - {"at", "action", "target", "value", "delay_s"}
        if unknown:
            raise ValueError(f"unknown fault keys: {sorted(unknown)}")
        at = raw["at"]
        if isinstance(at, str):
            if at not in MISSION_EVENTS:
                raise ValueError(f"unknown fault trigger {at!r}; expected one of {MISSION_EVENTS}")
        elif isinstance(at, (int, float)) and not isinstance(at, bool) and at >= 0:
            at = us(at)
        else:
            raise ValueError(f"fault trigger must be a non-negative time in seconds or an event name, got {at!r}")
        action = FaultAction(raw["action"])
        value = raw.get("value")
        if action is FaultAction.LOSS_RATE_SET:
            if value is None or not 0.0 <= float(value) <= 1.0:
                raise ValueError("loss_rate_set needs a value in [0, 1]")
            value = float(value)
        delay = raw.get("delay_s", 0)
        if delay < 0:
            raise ValueError("fault delay must be non-negative")
        return cls(at, action, str(raw["target"]), value, us(delay))

    def describe(self) -> dict:
        out: dict[str, Any] = {"at": self.at, "action": self.action.value, "target": self.target}
        if self.value is not None:
            out["value"] = self.value
        if self.delay:
            out["delay_us"] = self.delay
        return out


@dataclass(frozen=True)
class AppliedFault:
    t: int
    entry: FaultEntry


class FaultInjector:
    """Resolves each entry's trigger to a concrete time and applies it exactly once."""

    def __init__(self, kernel: SimKernel, nodes: dict[str, Any], links: dict[str, LinkModel]):
        self.kernel = kernel
        self.nodes = nodes
        self.links = links
        self.applied: list[AppliedFault] = []

    def arm(self, plan: list[FaultEntry]) -> None:
        for entry in plan:
            self._check_target(entry)
            if isinstance(entry.at, str):
                self.kernel.on(entry.at, lambda t, e=entry: self._at(t + e.delay, e))
            else:
                self._at(entry.at + entry.delay, entry)

    def _at(self, t: int, entry: FaultEntry) -> None:
        if t <= self.kernel.now:
            self.apply_fault(entry)
        else:
            self.kernel.schedule(t, self.apply_fault, entry)

    def _check_target(self, entry: FaultEntry) -> None:
        if entry.action is FaultAction.NODE_CRASH:
            if entry.target not in self.nodes:
                raise UnknownTarget(entry.target)
        elif entry.target not in self.links:
            raise UnknownTarget(entry.target)

    def apply_fault(self, entry: FaultEntry) -> AppliedFault:
        self._check_target(entry)
        if entry.action is FaultAction.NODE_CRASH:
            self.nodes[entry.target].crash()
        else:
            link = self.links[entry.target]
            if entry.action is FaultAction.LINK_DOWN:
                link.up = False
            elif entry.action is FaultAction.LINK_UP:
                link.up = True
            else:
                link.set_loss(entry.value)
        record = AppliedFault(self.kernel.now, entry)
        self.applied.append(record)
        detail = "" if entry.value is None else f"value={entry.value}"
        self.kernel.trace.record(self.kernel.now, "sim", "FAULT", entry.target, f"{entry.action.value} {detail}".strip())
        return record
