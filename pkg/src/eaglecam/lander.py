"""Nova-C terminal descent, phase flag triggers, EagleCam ballistic fall, and the mission-control sink."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from . import ccsds
from .ccsds import CcsdsPacket, SequenceCounters
from .kernel import SimKernel, seconds
from .links import LinkModel
from .messages import (
    BatteryStatus,
    FlagKind,
    HealthStatusReport,
    MessageMap,
    PayloadError,
    PhaseFlag,
)

log = logging.getLogger(__name__)

LUNAR_G = 1.62


class NegativeAltitude(ValueError):
    pass


@dataclass(frozen=True)
class DescentState:
    altitude: float
    vertical_velocity: float  # m/s, negative = downward
    time: int  # us
    g: float = LUNAR_G

    def __post_init__(self) -> None:
        if self.altitude < 0:
            raise NegativeAltitude(f"altitude {self.altitude} m is below the surface")

    @property
    def terminal(self) -> bool:
        return self.altitude <= 0.0


@dataclass(frozen=True)
class ConstantRateProfile:
    """Terminal descent at a fixed sink rate, vertical velocity only."""

    rate_mps: float

    def velocity(self, state: DescentState) -> float:
        return -self.rate_mps


def step_descent(state: DescentState, dt: int, profile: ConstantRateProfile) -> DescentState:
    if state.terminal:
        raise ValueError("descent state is terminal")
    v = profile.velocity(state)
    altitude = max(0.0, state.altitude + v * seconds(dt))
    return replace(state, altitude=altitude, vertical_velocity=v, time=state.time + dt)


def crossing_time(before: DescentState, after: DescentState, threshold: float) -> Optional[int]:
    """Interpolated time at which altitude first reaches ``threshold`` within one step."""
    if before.altitude <= threshold:
        return before.time
    if after.altitude > threshold:
        return None
    frac = (before.altitude - threshold) / (before.altitude - after.altitude)
    return before.time + int(round(frac * (after.time - before.time)))


def time_of_impact(h: float, v0: float, g: float = LUNAR_G) -> float:
    """Seconds until a body released at height ``h`` with downward speed ``v0`` hits the ground."""
    if h < 0:
        raise NegativeAltitude(f"altitude {h} m is below the surface")
    if g <= 0 or v0 < 0:
        raise ValueError("need g > 0 and a non-negative downward speed")
    return (-v0 + math.sqrt(v0 * v0 + 2.0 * g * h)) / g


def propagate_freefall(state: DescentState, dt: int) -> DescentState:
    """One semi-implicit Euler step of ballistic flight (velocity first, then position)."""
    if state.terminal:
        raise ValueError("free-fall state is terminal")
    h = seconds(dt)
    v = state.vertical_velocity - state.g * h
    altitude = max(0.0, state.altitude + v * h)
    return replace(state, altitude=altitude, vertical_velocity=v, time=state.time + dt)


def integrate_impact(h: float, v0: float, g: float = LUNAR_G, dt: int = 1000) -> DescentState:
    """Propagate from release to the first step at or below the surface."""
    state = DescentState(h, -v0, 0, g)
    if state.terminal:
        return state
    while not state.terminal:
        state = propagate_freefall(state, dt)
    return state


@dataclass(frozen=True)
class EjectionConfig:
    deploy_altitude: float = 30.0
    capture_altitude: float = 50.0
    initial_vertical_velocity: float = 0.0  # downward, m/s
    horizontal_velocity: float = 0.0

    def __post_init__(self) -> None:
        if not self.capture_altitude > self.deploy_altitude > 0:
            raise ValueError("need capture_altitude > deploy_altitude > 0")
        if self.initial_vertical_velocity < 0:
            raise ValueError("ejection vertical velocity is a downward speed, must be >= 0")


class Kinematics:
    """Where EagleCam physically is; the IMU samples its regime from here."""

    def __init__(self, g: float = LUNAR_G, spike_duration: int = 75_000):
        self.g = g
        self.spike_duration = spike_duration
        self.eject_time: Optional[int] = None
        self.eject_altitude: Optional[float] = None
        self.impact_time: Optional[int] = None
        self.impact_speed: Optional[float] = None

    def regime(self, t: int) -> str:
        if self.eject_time is None or t < self.eject_time:
            return "attached"
        if self.impact_time is None or t < self.impact_time:
            return "freefall"
        if t < self.impact_time + self.spike_duration:
            return "impact"
        return "landed"


@dataclass
class FlagRecord:
    kind: FlagKind
    issued_at: int
    altitude: float


@dataclass
class ArchiveRecord:
    t: int
    raw: bytes
    apid: Optional[int] = None
    decoded: Optional[dict] = None
    error: Optional[str] = None


class MissionControl:
    """Ground sink for everything Nova-C relays; archives raw packets and decodes H&S."""

    def __init__(self, message_map: MessageMap):
        self.message_map = message_map
        self.archive: list[ArchiveRecord] = []
        self.decode_failures = 0

    def mission_control_ingest(self, data: bytes, t: int) -> ArchiveRecord:
        record = ArchiveRecord(t, bytes(data))
        try:
            packet = ccsds.decode_packet(data)
            record.apid = packet.apid
            d = self.message_map.by_apid(packet.apid)
            name = d.name if d else None
            if name == "HS_REPORT":
                record.decoded = HealthStatusReport.unpack(packet.payload).as_fields()
            elif name == "BATTERY_STATUS":
                hs = BatteryStatus.unpack(packet.payload)
                record.decoded = {"t": hs.t, "battery_soc": hs.battery.state_of_charge}
        except (ccsds.CcsdsError, PayloadError) as exc:
            record.error = f"DecodeFailure: {exc}"
            self.decode_failures += 1
            log.warning("mission control: %s", record.error)
        self.archive.append(record)
        return record

    def health_reports(self) -> list[ArchiveRecord]:
        hs = self.message_map["HS_REPORT"].apid
        return [r for r in self.archive if r.apid == hs and r.decoded is not None]

    def write_archive(self, path: Path | str) -> None:
        Path(path).write_text("".join(f"{r.t} {r.raw.hex()}\n" for r in self.archive))


class NovaC:
    """The lander: runs the descent, issues phase flags over Ethernet, fires the deploy signal."""

    name = "novac"

    def __init__(
        self,
        kernel: SimKernel,
        message_map: MessageMap,
        kinematics: Kinematics,
        start_altitude: float = 100.0,
        rate_mps: float = 1.5,
        ejection: EjectionConfig = EjectionConfig(),
        power_on_at: int = 0,
        deploy_signal_delay: int = 100_000,
        descent_dt: int = 10_000,
        freefall_dt: int = 1_000,
    ):
        if start_altitude <= 0 or rate_mps <= 0:
            raise ValueError("descent needs a positive start altitude and sink rate")
        self.kernel = kernel
        self.message_map = message_map
        self.kinematics = kinematics
        self.ejection = ejection
        self.profile = ConstantRateProfile(rate_mps)
        self.state = DescentState(start_altitude, -rate_mps, 0, kinematics.g)
        self.power_on_at = power_on_at
        self.deploy_signal_delay = deploy_signal_delay
        self.descent_dt = descent_dt
        self.freefall_dt = freefall_dt
        self.mission_control = MissionControl(message_map)
        self.flags: list[FlagRecord] = []
        self.link: Optional[LinkModel] = None
        self.seq = SequenceCounters()
        self.touchdown_time: Optional[int] = None
        self._pending_thresholds = [
            (FlagKind.START_CAPTURE, ejection.capture_altitude),
            (FlagKind.DEPLOYED, ejection.deploy_altitude),
        ]

    def attach(self, link: LinkModel) -> None:
        self.link = link

    def start(self) -> None:
        self.kernel.schedule(self.power_on_at, self._issue, FlagKind.POWER_ON, None)
        self.kernel.schedule(0, self._descend)

    def altitude_at(self, t: int) -> float:
        """Lander altitude at time ``t`` within the current descent step."""
        s = self.state
        return max(0.0, s.altitude + s.vertical_velocity * seconds(t - s.time))

    def _descend(self) -> None:
        before = self.state
        if before.terminal:
            return
        after = step_descent(before, self.descent_dt, self.profile)
        still = []
        for kind, threshold in self._pending_thresholds:
            t = crossing_time(before, after, threshold)
            if t is None:
                still.append((kind, threshold))
            else:
                self.kernel.schedule(max(t, self.kernel.now), self._issue, kind, threshold)
        self._pending_thresholds = still
        self.state = after
        if after.terminal:
            self.kernel.schedule(after.time, self._touchdown)
        else:
            self.kernel.schedule(after.time, self._descend)

    def _issue(self, kind: FlagKind, threshold: Optional[float]) -> None:
        now = self.kernel.now
        altitude = self.altitude_at(now)
        self.flags.append(FlagRecord(kind, now, altitude))
        self.kernel.trace.record(now, self.name, "FLAG", kind.name, f"alt={altitude:.3f}")
        self.kernel.emit({FlagKind.POWER_ON: "power_on", FlagKind.START_CAPTURE: "start_capture",
                          FlagKind.DEPLOYED: "deployed"}[kind])
        self._send_flag(PhaseFlag(kind, now))
        if kind is FlagKind.DEPLOYED:
            self.kernel.call_in(self.deploy_signal_delay, self._deploy_signal)

    def _send_flag(self, flag: PhaseFlag) -> None:
        d = self.message_map["PHASE_FLAG"]
        packet = CcsdsPacket.make(d.apid, flag.pack(), self.seq.take(d.apid), d.packet_type)
        self.link.submit(ccsds.encode_packet(packet), self.name)

    def _deploy_signal(self) -> None:
        now = self.kernel.now
        k = self.kinematics
        altitude = self.altitude_at(now)
        v0 = self.ejection.initial_vertical_velocity
        final = integrate_impact(altitude, v0, k.g, self.freefall_dt)
        k.eject_time = now
        k.eject_altitude = altitude
        k.impact_time = now + final.time
        k.impact_speed = -final.vertical_velocity
        self.kernel.trace.record(now, self.name, "DEPLOY_SIGNAL", "-", f"alt={altitude:.3f} v0={v0:.3f}")
        self.kernel.emit("eject")
        self.kernel.schedule(k.impact_time, self._impact)

    def _impact(self) -> None:
        k = self.kinematics
        self.kernel.trace.record(self.kernel.now, "eaglecam", "IMPACT", "-", f"speed={k.impact_speed:.4f}")
        self.kernel.emit("impact")

    def _touchdown(self) -> None:
        self.touchdown_time = self.kernel.now
        self.kernel.trace.record(self.kernel.now, self.name, "TOUCHDOWN")
        self.kernel.emit("touchdown")

    def receive(self, data: bytes, link: LinkModel) -> None:
        self.mission_control.mission_control_ingest(data, self.kernel.now)
