import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eaglecam import ccsds
from eaglecam.kernel import SimKernel
from eaglecam.lander import (
    ConstantRateProfile,
    DescentState,
    EjectionConfig,
    Kinematics,
    MissionControl,
    NegativeAltitude,
    NovaC,
    crossing_time,
    integrate_impact,
    propagate_freefall,
    step_descent,
    time_of_impact,
)
from eaglecam.links import LinkModel
from eaglecam.messages import (
    BatterySnapshot,
    FlagKind,
    HealthStatusReport,
    PhaseFlag,
    default_message_map,
)

MM = default_message_map()


def test_time_of_impact_examples():
    # frozen from an independent hand evaluation of the quadratic root
    assert time_of_impact(30, 0, 1.62) == pytest.approx(6.086, abs=5e-4)
    assert time_of_impact(30, 1.5, 1.62) == pytest.approx(5.230, abs=5e-4)
    assert time_of_impact(0, 0, 1.62) == 0.0
    with pytest.raises(NegativeAltitude):
        time_of_impact(-1, 0)


def test_integrator_matches_closed_form_at_30m():
    final = integrate_impact(30, 0, 1.62, dt=1000)
    assert abs(final.time / 1e6 - 6.086) <= 0.002
    half = integrate_impact(30, 0, 1.62, dt=500)
    assert abs(final.time - half.time) < 1000


def test_single_step_velocity():
    s = propagate_freefall(DescentState(30, 0.0, 0), 1000)
    assert s.vertical_velocity == pytest.approx(-1.62e-3, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 100), st.integers(0, 3))
def test_integrator_sweep_within_two_steps(h, v0):
    dt = 1000
    closed = time_of_impact(h, v0, 1.62)
    final = integrate_impact(h, v0, 1.62, dt)
    assert abs(final.time / 1e6 - closed) < 2 * dt / 1e6


@pytest.mark.parametrize("h", [1, 10, 30, 100])
def test_energy_sanity(h):
    final = integrate_impact(h, 0, 1.62, 1000)
    assert -final.vertical_velocity == pytest.approx(math.sqrt(2 * 1.62 * h), rel=1e-3)


def test_step_and_crossing():
    p = ConstantRateProfile(1.5)
    s0 = DescentState(100, -1.5, 0)
    s1 = step_descent(s0, 10_000, p)
    assert s1.altitude == pytest.approx(99.985)
    assert crossing_time(s0, s1, 50) is None
    a = DescentState(50.01, -1.5, 0)
    b = step_descent(a, 10_000, p)
    assert crossing_time(a, b, 50) == pytest.approx(6_667, abs=1)
    assert crossing_time(DescentState(50, -1.5, 7), b, 50) == 7


def test_ejection_config_ordering():
    with pytest.raises(ValueError):
        EjectionConfig(deploy_altitude=50, capture_altitude=30)


def test_kinematics_regimes():
    k = Kinematics()
    assert k.regime(10) == "attached"
    k.eject_time, k.impact_time = 100, 1_000
    assert [k.regime(t) for t in (50, 100, 999, 1_000, 76_000)] == ["attached", "freefall", "freefall", "impact", "landed"]


class Sink:
    name = "deployer"

    def __init__(self, kernel):
        self.kernel = kernel
        self.got = []

    def receive(self, data, link):
        self.got.append((self.kernel.now, ccsds.decode_packet(data)))


def run_lander(start=100.0, **kw):
    k = SimKernel(0)
    kin = Kinematics()
    nova = NovaC(k, MM, kin, start_altitude=start, **kw)
    sink = Sink(k)
    link = LinkModel("eth", 100_000_000, 200)
    link.attach(k, sink, nova)
    nova.attach(link)
    nova.start()
    k.run()
    return k, nova, sink


def test_flags_at_thresholds_and_ordered():
    k, nova, sink = run_lander()
    kinds = [f.kind for f in nova.flags]
    assert kinds == [FlagKind.POWER_ON, FlagKind.START_CAPTURE, FlagKind.DEPLOYED]
    times = {f.kind: f.issued_at for f in nova.flags}
    assert times[FlagKind.START_CAPTURE] == pytest.approx(33_333_333, abs=10_000)
    assert times[FlagKind.DEPLOYED] == pytest.approx(46_666_667, abs=10_000)
    alts = {f.kind: f.altitude for f in nova.flags}
    assert alts[FlagKind.START_CAPTURE] == pytest.approx(50, abs=0.015)
    assert alts[FlagKind.DEPLOYED] == pytest.approx(30, abs=0.015)
    assert [PhaseFlag.unpack(p.payload).kind for _, p in sink.got] == kinds
    assert all(p.header.packet_type == ccsds.PacketType.COMMAND for _, p in sink.got)
    m = k.milestones
    assert m["power_on"] < m["start_capture"] < m["deployed"] < m["eject"] < m["impact"]


def test_ballistic_fall_from_signal_altitude():
    k, nova, sink = run_lander()
    kin = nova.kinematics
    assert kin.eject_time - k.milestones["deployed"] == 100_000
    assert kin.eject_altitude == pytest.approx(29.85, abs=0.001)
    fall = (kin.impact_time - kin.eject_time) / 1e6
    assert fall == pytest.approx(time_of_impact(29.85, 0, 1.62), abs=0.002)
    assert k.trace.select(kind="IMPACT")[0][1] == "eaglecam"


def test_start_exactly_at_capture_altitude():
    k, nova, sink = run_lander(start=50.0)
    assert nova.flags[1].kind is FlagKind.START_CAPTURE
    assert nova.flags[1].issued_at == 0


def test_mission_control_archive(tmp_path):
    mc = MissionControl(MM)
    hs = HealthStatusReport(True, True, BatterySnapshot(8.0, 1.0, 0.9, 20.0), 42)
    raw = ccsds.encode_packet(ccsds.CcsdsPacket.make(0x1B1, hs.pack()))
    rec = mc.mission_control_ingest(raw, 5)
    assert set(rec.decoded) == {"wifi_connected", "wifi_chip_ok", "battery", "data_folder_bytes"}
    chunk = ccsds.encode_packet(ccsds.CcsdsPacket.make(0x1A2, b"\x01abc"))
    assert mc.mission_control_ingest(chunk, 6).decoded is None
    bad = ccsds.encode_packet(ccsds.CcsdsPacket.make(0x1B1, b"\x01"))
    rec = mc.mission_control_ingest(bad, 7)
    assert rec.error.startswith("DecodeFailure")
    mc.mission_control_ingest(b"\x00", 8)
    assert len(mc.archive) == 4
    assert mc.decode_failures == 2
    assert len(mc.health_reports()) == 1
    mc.write_archive(tmp_path / "a.hex")
    first = (tmp_path / "a.hex").read_text().splitlines()[0]
    assert first == f"5 {raw.hex()}"
