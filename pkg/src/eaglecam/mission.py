"""Whole-mission orchestration: wire the nodes, links and lander, run, judge the outcome."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .deployer_apps import DeployerApps, WifiChip, build_deployer_node
from .eaglecam_apps import EagleCamApps, build_eaglecam_node
from .faults import FaultInjector
from .filesync import DeployerStore, StagingStore, SyncReceiver, SyncSender
from .kernel import SimKernel, Trace, seconds, us
from .lander import EjectionConfig, Kinematics, NovaC
from .links import LinkModel
from .messages import default_message_map
from .peripherals import KIND_NISA, EagleCamHardware, ImageMeta
from .scenario import Scenario


class TraceMismatch(AssertionError):
    """Replayed trace differs; ``line`` is 1-based, or "EOF" when one side ends early."""

    def __init__(self, line: Union[int, str], expected: str = "", actual: str = ""):
        self.line = line
        self.expected = expected
        self.actual = actual
        super().__init__(f"trace diverges at line {line}: expected {expected!r}, got {actual!r}")


@dataclass
class MissionReport:
    success: bool
    rationale: str
    qualifying_file: Optional[str]
    first_image_complete_at: Optional[float]
    images_complete_before_impact: int
    descent_images_complete: int
    arducam_images_complete: int
    files_at_deployer: int
    flag_timeline: list
    deploy_time: Optional[float]
    eject_time: Optional[float]
    eject_altitude: Optional[float]
    impact_time: Optional[float]
    impact_speed: Optional[float]
    landing_detected_at: Optional[float]
    eds: dict
    arducam_occlusion: dict
    hs_packets_archived: int
    packets_archived: int
    link_stats: dict
    fault_log: list
    end_time: float
    config: dict

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return yaml.safe_dump(self.as_dict(), sort_keys=False, default_flow_style=None)


@dataclass
class Mission:
    """Handles on every part of a wired-up run, for tests and reporting."""

    scenario: Scenario
    kernel: SimKernel
    kinematics: Kinematics
    hardware: EagleCamHardware
    staging: StagingStore
    store: DeployerStore
    eaglecam: Any
    deployer: Any
    ec_apps: EagleCamApps
    dep_apps: DeployerApps
    sender: SyncSender
    receiver: SyncReceiver
    novac: NovaC
    links: dict
    injector: FaultInjector
    stopped_quiet: bool = False
    landing_detected: Optional[int] = None
    extra: dict = field(default_factory=dict)

    @property
    def trace(self) -> Trace:
        return self.kernel.trace


def build_mission(scenario: Scenario) -> Mission:
    cfg = scenario.values
    kernel = SimKernel(cfg["seed"])
    mm = default_message_map()
    kin = Kinematics(cfg["gravity_mps2"], cfg["imu.spike_ms"] * 1000)
    hw = EagleCamHardware(kernel, kin, cfg)
    for cam in hw.nisa:
        cam.trigger_failures_left = cfg["nisa.trigger_failures"]

    staging = StagingStore()
    store = DeployerStore()
    ec_node, ec_apps = build_eaglecam_node(kernel, mm, hw, staging, cfg)
    sender = SyncSender(staging, "wifi", us(cfg["sync.period_s"]), cfg["sync.pace_ms"] * 1000,
                        max_backlog=cfg["sync.max_backlog_ms"] * 1000)
    ec_node.add_service(sender)

    boot_delay = us(cfg["eaglecam.boot_delay_s"])
    chip_fail = cfg["wifi.chip_fail_s"]
    chip = WifiChip(None if chip_fail is None else us(chip_fail))
    dep_node, dep_apps = build_deployer_node(kernel, mm, store, lambda: ec_node.power_on(boot_delay),
                                             chip, cfg)
    receiver = SyncReceiver(store, "wifi")
    dep_node.add_service(receiver)

    novac = NovaC(
        kernel, mm, kin,
        start_altitude=cfg["descent.start_altitude_m"],
        rate_mps=cfg["descent.rate_mps"],
        ejection=EjectionConfig(cfg["eject.deploy_alt_m"], cfg["eject.capture_alt_m"],
                                cfg["eject.v0_mps"], cfg["eject.horizontal_mps"]),
        power_on_at=us(cfg["power_on_s"]),
        deploy_signal_delay=cfg["eject.signal_delay_ms"] * 1000,
        descent_dt=cfg["descent.dt_ms"] * 1000,
        freefall_dt=cfg["eject.freefall_dt_ms"] * 1000,
    )

    wifi = LinkModel("wifi", int(cfg["links.wifi.bandwidth_bps"]), cfg["links.wifi.latency_us"],
                     float(cfg["links.wifi.loss"]))
    wifi.attach(kernel, ec_node, dep_node)
    ec_node.attach_link(wifi, downlink=True)
    dep_node.attach_link(wifi)
    eth = LinkModel("eth", int(cfg["links.eth.bandwidth_bps"]), cfg["links.eth.latency_us"],
                    float(cfg["links.eth.loss"]))
    eth.attach(kernel, dep_node, novac)
    dep_node.attach_link(eth, downlink=True)
    novac.attach(eth)
    links = {"wifi": wifi, "eth": eth}

    injector = FaultInjector(kernel, {"eaglecam": ec_node, "deployer": dep_node}, links)
    mission = Mission(scenario, kernel, kin, hw, staging, store, ec_node, dep_node, ec_apps,
                      dep_apps, sender, receiver, novac, links, injector)

    def on_bus(msg) -> None:
        if msg.name == "LANDED_EVENT" and mission.landing_detected is None:
            mission.landing_detected = msg.sim_time
            kernel.emit("landed")

    ec_node.monitors.append(on_bus)
    kernel.on("impact", lambda t: [cam.dust_event(t) for cam in hw.arducams])
    if chip.fail_at is not None:
        kernel.schedule(chip.fail_at, _chip_failure, kernel, wifi)
    injector.arm(scenario.fault_plan())
    return mission


def _chip_failure(kernel: SimKernel, wifi: LinkModel) -> None:
    wifi.up = False
    kernel.trace.record(kernel.now, "deployer", "WIFI_CHIP_FAIL", "wifi")


def _surface_ops_finished(m: Mission) -> bool:
    apps = m.ec_apps
    return apps.nisa.done and apps.arducam.done and apps.imu.dumped


def _quiet(m: Mission) -> bool:
    """Nothing left that could change the outcome or the deployer's store."""
    if "touchdown" not in m.kernel.milestones or "impact" not in m.kernel.milestones:
        return False
    if not m.eaglecam.alive:
        return True
    return _surface_ops_finished(m) and not m.sender.pending


def _watch(m: Mission, grace: int) -> None:
    if _quiet(m):
        m.stopped_quiet = True
        m.kernel.trace.record(m.kernel.now, "sim", "QUIESCENT")
        m.kernel.schedule(m.kernel.now + grace, m.kernel.stop)
        return
    m.kernel.call_in(1_000_000, _watch, m, grace)


def run_mission(scenario: Scenario) -> Mission:
    m = build_mission(scenario)
    cfg = scenario.values
    kernel = m.kernel
    kernel.trace.record(0, "sim", "RUN_START", "-", f"max_duration={cfg['run.max_duration_s']}")
    m.deployer.power_on(0)
    m.novac.start()
    if cfg["run.stop_when_quiet"]:
        kernel.schedule(1_000_000, _watch, m, us(cfg["run.quiet_grace_s"]))
    end = kernel.run(until=us(cfg["run.max_duration_s"]))
    kernel.trace.record(end, "sim", "RUN_END")
    return m


def evaluate_success(store: DeployerStore, deploy_time: Optional[int], impact_time: Optional[int],
                     end_time: Optional[int] = None) -> tuple[bool, str, Optional[str]]:
    """Success: a hash-verified NISA image captured between deployment and impact is at the deployer."""
    if deploy_time is None or impact_time is None:
        return False, "no deployment/impact happened during the run", None
    best = None
    for f in store.complete_files():
        if not f.path.startswith("nisa/"):
            continue
        meta = ImageMeta.unpack(f.data)
        if meta.kind != KIND_NISA or not deploy_time <= meta.t <= impact_time:
            continue
        if end_time is not None and f.completed_at > end_time:
            continue
        if best is None or f.completed_at < best[0]:
            best = (f.completed_at, f.path, meta.t)
    if best is None:
        return False, "no complete NISA image captured during descent reached the deployer", None
    return True, (f"{best[1]} captured at {seconds(best[2]):.3f} s during descent, "
                  f"complete at the deployer at {seconds(best[0]):.3f} s"), best[1]


def _opt_s(t: Optional[int]) -> Optional[float]:
    return None if t is None else seconds(t)


def build_report(m: Mission) -> MissionReport:
    k = m.kernel
    kin = m.kinematics
    deploy_time = k.milestones.get("deployed")
    impact_time = k.milestones.get("impact")
    end = k.now
    success, rationale, qualifying = evaluate_success(m.store, deploy_time, impact_time, end)

    first_complete = None
    descent = before_impact = arducam = 0
    for f in m.store.complete_files():
        if first_complete is None or f.completed_at < first_complete:
            first_complete = f.completed_at
        if f.path.startswith("arducam/"):
            arducam += 1
        if f.path.startswith("nisa/") and deploy_time is not None and impact_time is not None:
            t = ImageMeta.unpack(f.data).t
            if deploy_time <= t <= impact_time:
                descent += 1
                if f.completed_at <= impact_time:
                    before_impact += 1

    mc = m.novac.mission_control
    eds = m.ec_apps.eds
    cam_app = m.ec_apps.arducam
    cfg = m.scenario.values
    config = dict(cfg)
    config["faults"] = m.scenario.faults
    return MissionReport(
        success=success,
        rationale=rationale,
        qualifying_file=qualifying,
        first_image_complete_at=_opt_s(first_complete),
        images_complete_before_impact=before_impact,
        descent_images_complete=descent,
        arducam_images_complete=arducam,
        files_at_deployer=len(m.store.complete_files()),
        flag_timeline=[{"flag": f.kind.name, "t": seconds(f.issued_at), "altitude_m": round(f.altitude, 6)}
                       for f in m.novac.flags],
        deploy_time=_opt_s(deploy_time),
        eject_time=_opt_s(kin.eject_time),
        eject_altitude=kin.eject_altitude,
        impact_time=_opt_s(impact_time),
        impact_speed=kin.impact_speed,
        landing_detected_at=_opt_s(m.landing_detected),
        eds={
            "activation_delay_s": cfg["eds.activation_delay_s"],
            "active_s": cfg["eds.active_s"],
            "on_at": _opt_s(eds.switched_on),
            "off_at": _opt_s(eds.switched_off),
        },
        arducam_occlusion={"pre": cam_app.occlusions("pre"), "post": cam_app.occlusions("post")},
        hs_packets_archived=len(mc.health_reports()),
        packets_archived=len(mc.archive),
        link_stats={name: link.stats.as_dict() for name, link in m.links.items()},
        fault_log=[{"t": seconds(a.t), **a.entry.describe()} for a in m.injector.applied],
        end_time=seconds(end),
        config=config,
    )


def run_scenario(scenario: Scenario) -> tuple[MissionReport, Trace]:
    m = run_mission(scenario)
    return build_report(m), m.kernel.trace


def replay_trace(trace_path: Union[str, Path], scenario: Scenario) -> str:
    """Re-run ``scenario`` and compare against a recorded trace. Returns "PASS" or raises TraceMismatch."""
    recorded = Path(trace_path).read_text().splitlines()
    _, trace = run_scenario(scenario)
    fresh = trace.text().splitlines()
    for i, (a, b) in enumerate(zip(recorded, fresh), start=1):
        if a != b:
            raise TraceMismatch(i, a, b)
    if len(recorded) != len(fresh):
        n = min(len(recorded), len(fresh))
        expected = fresh[n] if n < len(fresh) else "<end>"
        actual = recorded[n] if n < len(recorded) else "<end>"
        raise TraceMismatch("EOF", expected, actual)
    return "PASS"
