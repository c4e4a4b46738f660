"""Deployer node apps: WiFi monitor, Nova-C relay and the health/status report."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .cfs import App, BusMessage, CiApp, NodeRuntime, ScheduleEntry, ScheduleTable, ToApp
from .filesync import DeployerStore
from .kernel import SimKernel
from .messages import (
    BatterySnapshot,
    BatteryStatus,
    CmdAck,
    FlagKind,
    HealthStatusReport,
    MessageMap,
    PhaseFlag,
    WifiProbe,
)


@dataclass(frozen=True)
class WifiStatus:
    connected: bool
    chip_ok: bool
    t: int


class WifiChip:
    """Deployer WiFi chip health: good until an optional failure time."""

    def __init__(self, fail_at: Optional[int] = None):
        self.fail_at = fail_at

    def ok(self, now: int) -> bool:
        return self.fail_at is None or now < self.fail_at


class WifiApp(App):
    """Pings EagleCam once per wakeup; connected means the echo came back within the timeout."""

    name = "WIFI"
    subscriptions = ("WAKEUP_WIFI", "WIFI_PROBE_REPLY")

    def __init__(self, chip: Optional[WifiChip] = None, link_name: str = "wifi", timeout: int = 500_000):
        super().__init__()
        self.chip = chip or WifiChip()
        self.link_name = link_name
        self.timeout = timeout
        self.probes_sent = 0
        self.replies = 0
        self.history: list[WifiStatus] = []
        self._next_id = 1
        self._answered: set[int] = set()

    def handle(self, msg: BusMessage) -> None:
        now = self.node.now
        if msg.name == "WIFI_PROBE_REPLY":
            probe: WifiProbe = msg.payload
            if now - probe.sent_at <= self.timeout:
                self._answered.add(probe.probe_id)
                self.replies += 1
            return
        if not self.chip.ok(now):
            self._publish(False, False)
            return
        probe_id = self._next_id
        self._next_id += 1
        self.node.transmit(self.link_name, "WIFI_PROBE", WifiProbe(probe_id, now).pack())
        self.probes_sent += 1
        self.node.call_later(self.timeout, self._evaluate, probe_id)

    def _evaluate(self, probe_id: int) -> None:
        connected = probe_id in self._answered
        self._answered.discard(probe_id)
        self._publish(connected, self.chip.ok(self.node.now))

    def _publish(self, connected: bool, chip_ok: bool) -> None:
        status = WifiStatus(connected, chip_ok, self.node.now)
        self.history.append(status)
        self.node.send("WIFI_STATUS", status)

    def connected_fraction(self) -> float:
        if not self.history:
            return 0.0
        return sum(s.connected for s in self.history) / len(self.history)


@dataclass
class PendingFlag:
    flag: PhaseFlag
    sends: int = 0
    last_sent: Optional[int] = None


class NovacApp(App):
    """Bridges Nova-C and EagleCam.

    Power-on is handled locally. The capture and deploy flags are forwarded
    over WiFi strictly in order, one outstanding at a time, and retransmitted
    on the wakeup until EagleCam's CI acknowledges them. EagleCam battery
    telemetry is relayed to Nova-C as it arrives, and once per wakeup the
    four-field health/status report is assembled and handed to TO.
    """

    name = "NOVAC"
    subscriptions = ("PHASE_FLAG", "CMD_ACK", "BATTERY_STATUS", "WIFI_STATUS", "WAKEUP_NOVAC")

    def __init__(self, store: DeployerStore, power_eaglecam: Callable[[], None],
                 wifi_link: str = "wifi", eth_link: str = "eth", retry_after: int = 500_000,
                 max_retries: int = 20, battery_stale_after: int = 3_000_000):
        super().__init__()
        self.store = store
        self.power_eaglecam = power_eaglecam
        self.wifi_link = wifi_link
        self.eth_link = eth_link
        self.retry_after = retry_after
        self.max_retries = max_retries
        self.battery_stale_after = battery_stale_after
        self.queue: deque[PendingFlag] = deque()
        self.seen_flags: set[FlagKind] = set()
        self.flag_sends: dict[FlagKind, int] = {}
        self.acked: list[FlagKind] = []
        self.given_up: list[FlagKind] = []
        self.forward_failures = 0
        self.relayed = 0
        self.reports: list[HealthStatusReport] = []
        self.eaglecam_seen = False
        self.wifi: Optional[WifiStatus] = None
        self.battery: Optional[BatterySnapshot] = None
        self.battery_at: Optional[int] = None

    def handle(self, msg: BusMessage) -> None:
        name = msg.name
        if name == "PHASE_FLAG":
            self._on_flag(msg.payload)
        elif name == "CMD_ACK":
            self._on_ack(msg.payload)
        elif name == "BATTERY_STATUS":
            self._on_battery(msg.payload)
        elif name == "WIFI_STATUS":
            self.wifi = msg.payload
        elif name == "WAKEUP_NOVAC":
            self._retry()
            self.node.send("HS_REPORT", self.assemble_health_status(self.node.now))

    def _on_flag(self, flag: PhaseFlag) -> None:
        if flag.kind in self.seen_flags:
            self.log_event("FLAG_DUPLICATE", flag.kind.name)
            return
        self.seen_flags.add(flag.kind)
        if flag.kind is FlagKind.POWER_ON:
            self.log_event("EAGLECAM_POWER_ON")
            self.power_eaglecam()
            return
        self.queue.append(PendingFlag(flag))
        self._send_head()

    def _send_head(self) -> None:
        if not self.queue or not self.eaglecam_seen:
            return
        head = self.queue[0]
        kind = head.flag.kind
        outcome = self.node.transmit(self.wifi_link, "PHASE_FLAG", head.flag.pack())
        head.sends += 1
        head.last_sent = self.node.now
        self.flag_sends[kind] = self.flag_sends.get(kind, 0) + 1
        if not outcome.delivered:
            self.forward_failures += 1
        self.log_event("FLAG_FORWARD", f"{kind.name} attempt={head.sends}")

    def _retry(self) -> None:
        if not self.queue or not self.eaglecam_seen:
            return
        head = self.queue[0]
        if head.last_sent is None:
            self._send_head()
            return
        if self.node.now - head.last_sent < self.retry_after:
            return
        if head.sends > self.max_retries:
            self.queue.popleft()
            self.given_up.append(head.flag.kind)
            self.log_event("FLAG_GIVE_UP", head.flag.kind.name)
        self._send_head()

    def _on_ack(self, ack: CmdAck) -> None:
        if not self.queue or ack.flag_kind != int(self.queue[0].flag.kind):
            return
        head = self.queue.popleft()
        self.acked.append(head.flag.kind)
        self.log_event("FLAG_ACKED", head.flag.kind.name)
        self._send_head()

    def _on_battery(self, status: BatteryStatus) -> None:
        self.battery = status.battery
        self.battery_at = self.node.now
        self.node.transmit(self.eth_link, "BATTERY_STATUS", status.pack())
        self.relayed += 1
        if not self.eaglecam_seen:
            self.eaglecam_seen = True
            self._send_head()

    def assemble_health_status(self, now: int) -> HealthStatusReport:
        """Snapshot of the four report fields; a missing or stale battery reading is zeroed."""
        battery = self.battery
        if battery is None or now - self.battery_at > self.battery_stale_after:
            battery = BatterySnapshot.zeroed()
        wifi = self.wifi
        report = HealthStatusReport(
            wifi_connected=bool(wifi and wifi.connected),
            wifi_chip_ok=bool(wifi.chip_ok) if wifi else True,
            battery=battery,
            data_folder_bytes=self.store.total_bytes,
        )
        self.reports.append(report)
        return report


def deployer_schedule(cfg: dict) -> ScheduleTable:
    return ScheduleTable(
        [
            ScheduleEntry("WAKEUP_WIFI", int(cfg.get("wifi.probe_period_s", 1.0) * 1e6), 0),
            ScheduleEntry("WAKEUP_NOVAC", 1_000_000, 500_000),
        ],
        int(cfg.get("sched.base_tick_us", 5_000)),
    )


@dataclass
class DeployerApps:
    wifi: WifiApp
    novac: NovacApp
    to: ToApp
    ci: CiApp


def build_deployer_node(kernel: SimKernel, message_map: MessageMap, store: DeployerStore,
                        power_eaglecam: Callable[[], None], chip: Optional[WifiChip] = None,
                        cfg: Optional[dict] = None) -> tuple[NodeRuntime, DeployerApps]:
    cfg = cfg or {}
    node = NodeRuntime("deployer", kernel, message_map, deployer_schedule(cfg),
                       int(cfg.get("sched.base_tick_us", 5_000)))
    apps = DeployerApps(
        wifi=WifiApp(chip, timeout=int(cfg.get("wifi.probe_timeout_ms", 500) * 1000)),
        novac=NovacApp(store, power_eaglecam,
                       max_retries=int(cfg.get("novac.max_retries", 20)),
                       battery_stale_after=int(cfg.get("novac.battery_stale_s", 3.0) * 1e6)),
        to=ToApp("deployer", message_map),
        ci=CiApp(),
    )
    for app in (apps.wifi, apps.novac, apps.to, apps.ci):
        node.register_app(app)
    return node, apps
