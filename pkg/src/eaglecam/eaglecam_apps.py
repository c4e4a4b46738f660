"""The five EagleCam mission apps: IMU, NISA, ArduCam, EDS and Battery.

Each app is a bus-driven state machine. Apps keep their own view of the
mission phase and share nothing except bus messages; the peripherals and the
staging store are the only hardware they touch.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .cfs import App, BusMessage, CiApp, NodeRuntime, ScheduleEntry, ScheduleTable, ToApp
from .filesync import StagingStore
from .kernel import SimKernel
from .messages import BatteryStatus, FlagKind, ImuBatch, ImuSample, MessageMap, PhaseFlag
from .peripherals import (
    AlreadyCapturing,
    EagleCamHardware,
    NisaCameraSim,
    NotInitialized,
)

IMU_DUMP_MAGIC = b"EIMU"
# magic, u32 sample count, u16 rate (Hz), u16 record size; then fixed-width ImuSample records
IMU_DUMP_HEADER = struct.Struct(">4sIHH")
IMU_DUMP_PATH = "imu/imu_dump.bin"


class MissionPhase(Enum):
    STANDBY = "Standby"
    CAPTURING = "Capturing"
    DEPLOYED = "Deployed"
    LANDED = "Landed"
    SURFACE_OPS_DONE = "SurfaceOpsDone"


@dataclass
class EagleCamMissionState:
    """One app's view of the mission phase. Transitions only move forward one step."""

    phase: MissionPhase = MissionPhase.STANDBY
    flag_times: dict = field(default_factory=dict)
    landing_time: Optional[int] = None
    rejections: int = 0

    _ADVANCE = {
        FlagKind.START_CAPTURE: (MissionPhase.STANDBY, MissionPhase.CAPTURING),
        FlagKind.DEPLOYED: (MissionPhase.CAPTURING, MissionPhase.DEPLOYED),
    }

    def on_flag(self, kind: FlagKind, t: int) -> bool:
        step = self._ADVANCE.get(kind)
        if step is None or self.phase is not step[0]:
            self.rejections += 1
            return False
        self.phase = step[1]
        self.flag_times[kind] = t
        return True

    def on_landed(self, t: int) -> bool:
        if self.phase is not MissionPhase.DEPLOYED:
            self.rejections += 1
            return False
        self.phase = MissionPhase.LANDED
        self.landing_time = t
        return True

    def surface_ops_done(self) -> bool:
        if self.phase is not MissionPhase.LANDED:
            return False
        self.phase = MissionPhase.SURFACE_OPS_DONE
        return True


class MissionApp(App):
    """Shared flag handling: apply to the phase view, log rejections."""

    def __init__(self) -> None:
        super().__init__()
        self.state = EagleCamMissionState()

    def accept_flag(self, msg: BusMessage) -> Optional[FlagKind]:
        flag: PhaseFlag = msg.payload
        if self.state.on_flag(flag.kind, self.node.now):
            self.log_event("FLAG_ACCEPT", flag.kind.name)
            return flag.kind
        self.log_event("FLAG_REJECT", f"{flag.kind.name} in {self.state.phase.value}")
        return None


@dataclass(frozen=True)
class LandedEvent:
    t: int
    reason: str  # "spike" or "timeout"


@dataclass(frozen=True)
class EdsState:
    active: bool
    t: int


@dataclass(frozen=True)
class DoneEvent:
    t: int
    count: int
    timeout: bool = False


class LandingDetector:
    """Landing = two consecutive samples above the spike threshold, or a timeout after deploy."""

    def __init__(self, threshold: float = 30.0, consecutive: int = 2, fallback: int = 10_000_000):
        self.threshold = threshold
        self.consecutive = consecutive
        self.fallback = fallback
        self.deploy_time: Optional[int] = None
        self.fired = False
        self._run = 0

    def arm(self, deploy_time: int) -> None:
        if self.deploy_time is None:
            self.deploy_time = deploy_time

    def feed(self, sample: ImuSample) -> Optional[str]:
        if self.deploy_time is None or self.fired:
            return None
        if sample.accel_magnitude > self.threshold:
            self._run += 1
        else:
            self._run = 0
        if self._run >= self.consecutive:
            self.fired = True
            return "spike"
        return self.check_timeout(sample.t)

    def check_timeout(self, now: int) -> Optional[str]:
        if self.deploy_time is None or self.fired:
            return None
        if now >= self.deploy_time + self.fallback:
            self.fired = True
            return "timeout"
        return None


class ImuApp(MissionApp):
    name = "IMU"
    subscriptions = ("WAKEUP_IMU", "PHASE_FLAG", "LANDED_EVENT")
    pipe_depth = 64

    def __init__(self, hw: EagleCamHardware, staging: StagingStore, capacity: int = 65536,
                 batch_size: int = 40, detector: Optional[LandingDetector] = None):
        super().__init__()
        self.hw = hw
        self.staging = staging
        self.buffer: deque[ImuSample] = deque(maxlen=capacity)
        self.capacity = capacity
        self.batch_size = batch_size
        self.detector = detector or LandingDetector()
        self.evictions = 0
        self.samples_read = 0
        self.dumped = False
        self._batch: list[ImuSample] = []

    def init(self, node: NodeRuntime) -> None:
        self.hw.imu.enabled = True

    def handle(self, msg: BusMessage) -> None:
        now = self.node.now
        if msg.name == "PHASE_FLAG":
            kind = self.accept_flag(msg)
            if kind is FlagKind.START_CAPTURE:
                self.log_event("IMU_BUFFER_START")
            elif kind is FlagKind.DEPLOYED:
                self.detector.arm(now)
        elif msg.name == "WAKEUP_IMU":
            if self.state.phase in (MissionPhase.CAPTURING, MissionPhase.DEPLOYED):
                self._sample(now)
        elif msg.name == "LANDED_EVENT":
            if self.state.on_landed(now):
                self._dump(now)

    def _sample(self, now: int) -> None:
        sample = self.hw.imu.imu_read(self.hw.regime(now), now)
        self.samples_read += 1
        if len(self.buffer) == self.capacity:
            self.evictions += 1
        self.buffer.append(sample)
        self._batch.append(sample)
        if len(self._batch) >= self.batch_size:
            self._flush_batch()
        if self.state.phase is MissionPhase.DEPLOYED:
            reason = self.detector.feed(sample)
            if reason:
                self.log_event("LANDING_DETECTED", reason)
                self.node.send("LANDED_EVENT", LandedEvent(now, reason))

    def _flush_batch(self) -> None:
        if self._batch:
            self.node.send("IMU_TLM", ImuBatch(self.evictions, tuple(self._batch)))
            self._batch = []

    def _dump(self, now: int) -> None:
        if self.dumped:
            return
        self._flush_batch()
        samples = list(self.buffer)
        header = IMU_DUMP_HEADER.pack(IMU_DUMP_MAGIC, len(samples), int(self.hw.imu.rate_hz),
                                      ImuSample.SIZE)
        self.staging.add(IMU_DUMP_PATH, header + b"".join(s.pack() for s in samples), now)
        self.dumped = True
        self.log_event("IMU_DUMP", f"samples={len(samples)} evictions={self.evictions}")
        self.node.send("IMU_DUMPED", DoneEvent(now, len(samples)))


def read_imu_dump(data: bytes) -> tuple[int, list[ImuSample]]:
    magic, count, rate, size = IMU_DUMP_HEADER.unpack_from(data)
    if magic != IMU_DUMP_MAGIC or size != ImuSample.SIZE:
        raise ValueError("not an IMU dump file")
    body = data[IMU_DUMP_HEADER.size :]
    if len(body) != count * size:
        raise ValueError("IMU dump length does not match its header")
    return rate, [ImuSample.unpack(body[i : i + size]) for i in range(0, len(body), size)]


class NisaApp(MissionApp):
    """Triggers the three NISA OBCs and pulls their frames over USB into staging.

    Before landing only the newest frame is pulled each wakeup (cameras in
    rotation), which keeps fresh landing imagery flowing to the deployer. After
    landing the cameras stop and every remaining frame is drained oldest first.
    """

    name = "NISA"
    subscriptions = ("PHASE_FLAG", "WAKEUP_NISA", "LANDED_EVENT")

    def __init__(self, hw: EagleCamHardware, staging: StagingStore, usb_bps: int = 40_000_000,
                 ftp_chunk: int = 64 * 1024, live_per_wakeup: int = 1):
        super().__init__()
        self.hw = hw
        self.staging = staging
        self.usb_bps = usb_bps
        self.ftp_chunk = ftp_chunk
        self.live_per_wakeup = live_per_wakeup
        self.to_trigger: list[NisaCameraSim] = []
        self.trigger_acks = 0
        self.trigger_failures = 0
        self.requested: set[str] = set()
        self.downloaded: list[str] = []
        self._queues: dict[int, deque[str]] = {cam.id: deque() for cam in hw.nisa}
        self._busy: dict[int, bool] = {cam.id: False for cam in hw.nisa}
        self._rotation = 0
        self.done = False

    def handle(self, msg: BusMessage) -> None:
        now = self.node.now
        if msg.name == "PHASE_FLAG":
            if self.accept_flag(msg) is FlagKind.START_CAPTURE:
                self.to_trigger = list(self.hw.nisa)
                self._trigger_pending()
        elif msg.name == "LANDED_EVENT":
            if self.state.on_landed(now):
                for cam in self.hw.nisa:
                    cam.stop(now)
                self.log_event("NISA_STOP")
                self._enqueue_drain()
        elif msg.name == "WAKEUP_NISA":
            self._trigger_pending()
            if self.state.phase in (MissionPhase.CAPTURING, MissionPhase.DEPLOYED):
                self._enqueue_live()
            elif self.state.phase is MissionPhase.LANDED:
                self._enqueue_drain()
                self._check_done()

    def _trigger_pending(self) -> None:
        if not self.to_trigger:
            return
        failed = []
        for cam in self.to_trigger:
            try:
                ok = cam.nisa_trigger(self.node.now)
            except AlreadyCapturing:
                ok = True
            if ok:
                self.trigger_acks += 1
                self.log_event("NISA_TRIGGER_ACK", f"cam={cam.id}")
            else:
                failed.append(cam)
                self.trigger_failures += 1
                self.log_event("NISA_TRIGGER_FAIL", f"cam={cam.id}")
        self.to_trigger = failed
        if failed:
            self.node.send("NISA_STATUS", {"trigger_failures": self.trigger_failures})

    def _enqueue_live(self) -> None:
        cams = [c for c in self.hw.nisa if c.capturing]
        for _ in range(min(self.live_per_wakeup, len(cams))):
            cam = cams[self._rotation % len(cams)]
            self._rotation += 1
            names = cam.list_files(self.node.now)
            if names and names[-1] not in self.requested:
                self._request(cam, names[-1])

    def _enqueue_drain(self) -> None:
        remaining = []
        for cam in self.hw.nisa:
            for name in cam.list_files(self.node.now):
                if name not in self.requested:
                    remaining.append((cam.store[name].meta.t, cam.id, cam, name))
        for _, _, cam, name in sorted(remaining, key=lambda r: r[:2]):
            self._request(cam, name)

    def _request(self, cam: NisaCameraSim, name: str) -> None:
        self.requested.add(name)
        self._queues[cam.id].append(name)
        if not self._busy[cam.id]:
            self._start_next(cam)

    def _start_next(self, cam: NisaCameraSim) -> None:
        queue = self._queues[cam.id]
        if not queue:
            self._busy[cam.id] = False
            return
        self._busy[cam.id] = True
        name = queue.popleft()
        size = cam.store[name].size
        parts = [cam.nisa_serve_file(name, off, min(self.ftp_chunk, size - off))
                 for off in range(0, size, self.ftp_chunk)]
        duration = -(-size * 8 * 1_000_000 // self.usb_bps)
        self.node.call_later(duration, self._finished, cam, name, b"".join(parts))

    def _finished(self, cam: NisaCameraSim, name: str, data: bytes) -> None:
        now = self.node.now
        self.staging.add(f"nisa/{name}", data, now)
        self.downloaded.append(name)
        self.node.send("IMAGE_AVAILABLE", {"path": f"nisa/{name}", "size": len(data)})
        self._start_next(cam)
        self._check_done()

    def _check_done(self) -> None:
        if self.done or self.state.phase is not MissionPhase.LANDED:
            return
        if any(self._busy.values()) or any(self._queues.values()):
            return
        total = sum(len(c.list_files(self.node.now)) for c in self.hw.nisa)
        if len(self.requested) < total:
            return
        self.done = True
        self.log_event("NISA_DONE", f"files={len(self.downloaded)}")
        self.node.send("NISA_DONE", DoneEvent(self.node.now, len(self.downloaded)))


class ArduCamApp(MissionApp):
    """After landing: a few frames, wait for the EDS cycle, then a few more."""

    name = "ARDUCAM"
    subscriptions = ("PHASE_FLAG", "LANDED_EVENT", "EDS_STATE")

    def __init__(self, hw: EagleCamHardware, staging: StagingStore, pre_count: int = 3,
                 post_count: int = 3, pre_capture_delay: int = 8_000_000,
                 eds_timeout: int = 60_000_000, init_ok: bool = True):
        super().__init__()
        self.hw = hw
        self.staging = staging
        self.pre_count = pre_count
        self.post_count = post_count
        self.pre_capture_delay = pre_capture_delay
        self.eds_timeout = eds_timeout
        self.init_ok = init_ok
        self.records: list[tuple[str, str, float, int]] = []  # (stage, path, occlusion, t)
        self.device_fault = False
        self.pre_done = False
        self.eds_cycle_done = False
        self.done = False

    def init(self, node: NodeRuntime) -> None:
        if self.init_ok:
            for cam in self.hw.arducams:
                cam.init(node.now)

    def handle(self, msg: BusMessage) -> None:
        if msg.name == "PHASE_FLAG":
            self.accept_flag(msg)
        elif msg.name == "LANDED_EVENT":
            if self.state.on_landed(self.node.now):
                self.node.call_later(self.pre_capture_delay, self._pre_capture)
        elif msg.name == "EDS_STATE":
            if not msg.payload.active:
                self.eds_cycle_done = True
                if self.pre_done:
                    self._post_capture()

    def _capture(self, stage: str, count: int) -> int:
        n = 0
        for _ in range(count):
            for cam in self.hw.arducams:
                try:
                    rec = cam.arducam_capture(self.node.now)
                except NotInitialized as exc:
                    if not self.device_fault:
                        self.device_fault = True
                        self.log_event("DEVICE_FAULT", str(exc))
                        self.node.send("DEVICE_FAULT", {"device": f"arducam{cam.id}", "error": str(exc)})
                    continue
                path = f"arducam/{rec.name}"
                self.staging.add(path, rec.data, self.node.now)
                self.records.append((stage, path, rec.occlusion, rec.t))
                self.log_event("ARDUCAM_CAPTURE", f"{stage} cam={cam.id} occlusion={rec.occlusion:.6f}")
                n += 1
        return n

    def _pre_capture(self) -> None:
        self._capture("pre", self.pre_count)
        self.pre_done = True
        if self.eds_cycle_done:
            self._post_capture()
        else:
            self.node.call_later(self.eds_timeout, self._timeout)

    def _post_capture(self) -> None:
        if self.done:
            return
        n = self._capture("post", self.post_count)
        self._finish(timeout=False, count=n)

    def _timeout(self) -> None:
        if not self.done:
            self.log_event("ARDUCAM_TIMEOUT", "EDS cycle never completed")
            self._finish(timeout=True, count=0)

    def _finish(self, timeout: bool, count: int) -> None:
        self.done = True
        self.node.send("ARDUCAM_DONE", DoneEvent(self.node.now, len(self.records), timeout))

    def occlusions(self, stage: str) -> list[float]:
        return [r[2] for r in self.records if r[0] == stage]


class EdsApp(MissionApp):
    """Switches the dust shield on a fixed delay after the capture flag, then off again."""

    name = "EDS"
    subscriptions = ("PHASE_FLAG", "WAKEUP_EDS")

    def __init__(self, hw: EagleCamHardware, activation_delay: int = 40_000_000,
                 active_duration: int = 15_000_000):
        super().__init__()
        self.hw = hw
        self.activation_delay = activation_delay
        self.active_duration = active_duration
        self.on_at: Optional[int] = None
        self.off_at: Optional[int] = None
        self.switched_on: Optional[int] = None
        self.switched_off: Optional[int] = None

    def handle(self, msg: BusMessage) -> None:
        now = self.node.now
        if msg.name == "PHASE_FLAG":
            if self.accept_flag(msg) is FlagKind.START_CAPTURE:
                self.on_at = now + self.activation_delay
                self.log_event("EDS_ARMED", f"on_at={self.on_at}")
        elif msg.name == "WAKEUP_EDS":
            if self.on_at is not None and self.switched_on is None and now >= self.on_at:
                self.hw.eds.gpio_write(True, now)
                self.switched_on = now
                self.off_at = now + self.active_duration
                self.log_event("EDS_ON")
                self.node.send("EDS_STATE", EdsState(True, now))
            elif self.switched_on is not None and self.switched_off is None and now >= self.off_at:
                self.hw.eds.gpio_write(False, now)
                self.switched_off = now
                self.log_event("EDS_OFF")
                self.node.send("EDS_STATE", EdsState(False, now))


class BatteryApp(App):
    name = "BATTERY"
    subscriptions = ("WAKEUP_BATTERY",)

    def __init__(self, hw: EagleCamHardware):
        super().__init__()
        self.hw = hw
        self.published = 0

    def init(self, node: NodeRuntime) -> None:
        if self.hw.battery.power_on_time is None:
            self.hw.battery.power_on(node.now)

    def handle(self, msg: BusMessage) -> None:
        now = self.node.now
        self.node.send("BATTERY_STATUS", BatteryStatus(now, self.hw.battery.battery_read(now)))
        self.published += 1


def eaglecam_schedule(cfg: dict) -> ScheduleTable:
    base = int(cfg.get("sched.base_tick_us", 5_000))
    imu_period = int(round(1e6 / cfg.get("imu.rate_hz", 40.0)))
    return ScheduleTable(
        [
            ScheduleEntry("WAKEUP_IMU", imu_period, 0),
            ScheduleEntry("WAKEUP_NISA", 1_000_000, 0),
            ScheduleEntry("WAKEUP_EDS", 100_000, 0),
            ScheduleEntry("WAKEUP_BATTERY", 1_000_000, 500_000),
        ],
        base,
    )


@dataclass
class EagleCamApps:
    imu: ImuApp
    nisa: NisaApp
    arducam: ArduCamApp
    eds: EdsApp
    battery: BatteryApp
    to: ToApp
    ci: CiApp


def build_eaglecam_node(kernel: SimKernel, message_map: MessageMap, hw: EagleCamHardware,
                        staging: StagingStore, cfg: Optional[dict] = None) -> tuple[NodeRuntime, EagleCamApps]:
    cfg = cfg or {}
    node = NodeRuntime("eaglecam", kernel, message_map, eaglecam_schedule(cfg),
                       int(cfg.get("sched.base_tick_us", 5_000)))
    depth = int(cfg.get("sched.pipe_depth", 16))
    detector = LandingDetector(cfg.get("landing.spike_threshold_mps2", 30.0),
                               int(cfg.get("landing.consecutive", 2)),
                               int(cfg.get("landing.fallback_s", 10.0) * 1e6))
    apps = EagleCamApps(
        imu=ImuApp(hw, staging, int(cfg.get("imu.buffer_capacity", 65536)),
                   int(cfg.get("imu.batch_size", 40)), detector),
        nisa=NisaApp(hw, staging, int(cfg.get("nisa.usb_mbps", 40) * 1e6),
                     live_per_wakeup=int(cfg.get("nisa.live_per_wakeup", 1))),
        arducam=ArduCamApp(hw, staging, int(cfg.get("arducam.pre_count", 3)),
                           int(cfg.get("arducam.post_count", 3)),
                           int(cfg.get("arducam.pre_capture_delay_s", 8.0) * 1e6),
                           int(cfg.get("arducam.eds_timeout_s", 60.0) * 1e6),
                           init_ok=not cfg.get("arducam.init_fail", False)),
        eds=EdsApp(hw, int(cfg.get("eds.activation_delay_s", 40.0) * 1e6),
                   int(cfg.get("eds.active_s", 15.0) * 1e6)),
        battery=BatteryApp(hw),
        to=ToApp("eaglecam", message_map),
        ci=CiApp(),
    )
    node.register_app(apps.imu, int(cfg.get("sched.imu_pipe_depth", 64)))
    for app in (apps.nisa, apps.arducam, apps.eds, apps.battery, apps.to, apps.ci):
        node.register_app(app, depth if app.pipe_depth == 16 else app.pipe_depth)
    return node, apps
