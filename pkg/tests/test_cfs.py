import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eaglecam import ccsds
from eaglecam.cfs import (
    CiApp,
    DuplicateApp,
    FunctionApp,
    NodeRuntime,
    RoutingError,
    ScheduleEntry,
    ScheduleTable,
    ToApp,
)
from eaglecam.eaglecam_apps import build_eaglecam_node
from eaglecam.filesync import StagingStore
from eaglecam.kernel import SimKernel
from eaglecam.lander import Kinematics
from eaglecam.links import LinkModel
from eaglecam.messages import (
    BatterySnapshot,
    BatteryStatus,
    CmdAck,
    FlagKind,
    PhaseFlag,
    UnknownMessageId,
    default_message_map,
)
from eaglecam.peripherals import EagleCamHardware

MM = default_message_map()


def node(schedule=None, name="n"):
    k = SimKernel(1)
    n = NodeRuntime(name, k, MM, schedule)
    return k, n


def recorder(name, subs, depth=16):
    seen = []
    return FunctionApp(name, subs, seen.append, depth), seen


class Wire:
    def __init__(self, name, kernel):
        self.name = name
        self.kernel = kernel
        self.got = []

    def receive(self, data, link):
        self.got.append(data)


def test_register_routes_and_duplicates():
    k, n = node()
    app, _ = recorder("IMU", ["WAKEUP_IMU", "PHASE_FLAG"])
    n.register_app(app)
    assert n.routes[MM["WAKEUP_IMU"].apid] == [app]
    assert n.routes[MM["PHASE_FLAG"].apid] == [app]
    with pytest.raises(DuplicateApp):
        n.register_app(recorder("IMU", [])[0])
    with pytest.raises(UnknownMessageId):
        n.register_app(recorder("X", ["NOT_A_MESSAGE"])[0])


def test_eaglecam_node_has_seven_pipes():
    k = SimKernel(1)
    hw = EagleCamHardware(k, Kinematics())
    n, apps = build_eaglecam_node(k, MM, hw, StagingStore())
    assert sorted(n.pipes) == ["ARDUCAM", "BATTERY", "CI", "EDS", "IMU", "NISA", "TO"]
    assert n.pipes["IMU"].depth == 64
    assert n.pipes["EDS"].depth == 16


def test_publish_reports():
    k, n = node()
    assert n.send("EDS_STATE").delivered == 0
    n.register_app(recorder("A", ["EDS_STATE"])[0])
    n.register_app(recorder("B", ["EDS_STATE"])[0])
    r = n.send("EDS_STATE")
    assert (r.delivered, r.dropped) == (2, 0)


def test_pipe_overflow_drops_fifth():
    k, n = node()
    n.register_app(recorder("A", ["EDS_STATE"], depth=4)[0])
    reports = [n.send("EDS_STATE") for _ in range(5)]
    assert reports[-1].dropped == 1
    assert n.pipes["A"].drops == 1
    assert len(n.pipes["A"]) == 4
    c = n.counters["EDS_STATE"]
    assert c.copies == c.delivered + c.dropped


def test_unknown_message_id_on_publish():
    from eaglecam.cfs import BusMessage
    from eaglecam.messages import MessageId, MessageKind

    k, n = node()
    with pytest.raises(UnknownMessageId):
        n.publish(BusMessage("X", MessageId(0x3FF, MessageKind.TELEMETRY), 0))


def test_scheduler_imu_forty_per_second():
    table = ScheduleTable([ScheduleEntry("WAKEUP_IMU", 25_000)])
    k, n = node(table)
    emitted = [m for t in range(0, 1_000_000, 5_000) for m in n.scheduler_tick(t)]
    assert len(emitted) == 40


def test_scheduler_empty_table_and_alternation():
    k, n = node(ScheduleTable([]))
    assert all(not n.scheduler_tick(t) for t in range(0, 100_000, 5_000))
    table = ScheduleTable([ScheduleEntry("WAKEUP_IMU", 10_000, 0), ScheduleEntry("WAKEUP_EDS", 10_000, 5_000)])
    k, n = node(table)
    names = [m.name for t in range(0, 50_000, 5_000) for m in n.scheduler_tick(t)]
    assert names == ["WAKEUP_IMU", "WAKEUP_EDS"] * 5


def test_schedule_table_validation():
    with pytest.raises(ValueError):
        ScheduleTable([ScheduleEntry("WAKEUP_IMU", 7_000)])
    with pytest.raises(ValueError):
        ScheduleTable([ScheduleEntry("WAKEUP_IMU", 10_000, 10_000)])
    with pytest.raises(ValueError):
        ScheduleTable([ScheduleEntry("WAKEUP_IMU", 10_000, 2_500)])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 60), st.integers(0, 59)), min_size=1, max_size=4),
       st.integers(0, 3_000))
def test_scheduler_exactness_property(specs, last_tick):
    """Over ticks 0..T every entry emits floor((T - offset)/period) + 1 wakeups."""
    names = ["WAKEUP_IMU", "WAKEUP_NISA", "WAKEUP_EDS", "WAKEUP_BATTERY"]
    entries = []
    for name, (p, o) in zip(names, specs):
        entries.append(ScheduleEntry(name, p * 5_000, (o % p) * 5_000))
    k, n = node(ScheduleTable(entries))
    counts = {e.msg: 0 for e in entries}
    for app_name, e in enumerate(entries):
        n.register_app(FunctionApp(f"A{app_name}", [e.msg], lambda m: counts.__setitem__(m.name, counts[m.name] + 1), 1000))
    n.power_on(0)
    T = last_tick * 5_000
    k.run(until=T)
    for e in entries:
        expected = (T - e.offset) // e.period + 1 if T >= e.offset else 0
        assert counts[e.msg] == expected


def test_dispatch_fifo_and_empty():
    k, n = node()
    app, seen = recorder("A", ["EDS_STATE"])
    n.register_app(app)
    n.powered = True
    assert n.dispatch_until_idle() == 0
    for i in range(3):
        n.send("EDS_STATE", i)
    assert n.dispatch_until_idle() == 3
    assert [m.payload for m in seen] == [0, 1, 2]


def test_handler_fault_isolated():
    k, n = node()
    calls = []

    def flaky(msg):
        calls.append(msg.payload)
        if msg.payload == 1:
            raise RuntimeError("boom")

    n.register_app(FunctionApp("BAD", ["EDS_STATE"], flaky))
    good, seen = recorder("GOOD", ["EDS_STATE"])
    n.register_app(good)
    n.powered = True
    for i in range(4):
        n.send("EDS_STATE", i)
    n.dispatch_until_idle()
    assert calls == [0, 1]
    assert [m.payload for m in seen] == [0, 1, 2, 3]
    assert n.faults[0].app == "BAD" and "boom" in n.faults[0].cause
    assert n.send("EDS_STATE", 9).dropped == 1


def test_routing_assertion():
    k, n = node()
    app, _ = recorder("A", ["EDS_STATE"])
    n.register_app(app)
    n.powered = True
    from eaglecam.cfs import BusMessage

    n.pipes["A"].offer(BusMessage("NISA_DONE", MM["NISA_DONE"].msg_id, 0))
    with pytest.raises(RoutingError):
        n.dispatch_until_idle()


LOCAL = ["LANDED_EVENT", "EDS_STATE", "IMAGE_AVAILABLE", "NISA_DONE", "ARDUCAM_DONE", "IMU_DUMPED"]


@settings(max_examples=60)
@given(st.lists(st.sets(st.sampled_from(LOCAL)), min_size=1, max_size=5),
       st.lists(st.sampled_from(LOCAL), max_size=40))
def test_routing_soundness_fuzz(topology, traffic):
    k, n = node()
    seen = {}
    for i, subs in enumerate(topology):
        app, got = recorder(f"A{i}", sorted(subs), depth=64)
        seen[app.name] = (subs, got)
        n.register_app(app)
    n.powered = True
    for name in traffic:
        n.send(name)
    n.dispatch_until_idle()
    for subs, got in seen.values():
        assert all(m.name in subs for m in got)
        assert len(got) == sum(1 for t in traffic if t in subs)


def wired_node(name="eaglecam"):
    k = SimKernel(1)
    n = NodeRuntime(name, k, MM)
    peer = Wire("peer", k)
    link = LinkModel("wifi", 20_000_000, 100)
    link.attach(k, n, peer)
    n.attach_link(link, downlink=True)
    return k, n, peer, link


def test_to_forwards_downlink_telemetry():
    k, n, peer, link = wired_node()
    n.register_app(ToApp("eaglecam", MM))
    n.power_on(0)
    k.run()
    status = BatteryStatus(10, BatterySnapshot(8.4, 1.8, 1.0, 20.0))
    n.send("BATTERY_STATUS", status)
    n.dispatch_until_idle()
    k.run()
    p = ccsds.decode_packet(peer.got[0])
    assert p.apid == 0x1A0
    assert BatteryStatus.unpack(p.payload) == status


def test_ci_ingests_flag_and_acks():
    k, n, peer, link = wired_node()
    app, seen = recorder("EDS", ["PHASE_FLAG"])
    n.register_app(app)
    n.register_app(CiApp())
    n.power_on(0)
    k.run()
    flag = PhaseFlag(FlagKind.START_CAPTURE, 33)
    raw = ccsds.encode_packet(ccsds.CcsdsPacket.make(0x1B0, flag.pack(), 4, ccsds.PacketType.COMMAND))
    n.receive(raw, link)
    k.run()
    assert [m.payload for m in seen] == [flag]
    ack = ccsds.decode_packet(peer.got[0])
    assert ack.apid == 0x1B2
    assert CmdAck.unpack(ack.payload) == CmdAck(0x1B0, 4, 3)


def test_ci_rejects_malformed_and_local_apids():
    k, n, peer, link = wired_node()
    ci = CiApp()
    n.register_app(ci)
    n.power_on(0)
    k.run()
    n.receive(b"\x01\xa0", link)
    n.receive(ccsds.encode_packet(ccsds.CcsdsPacket.make(0x010, b"x")), link)
    n.receive(ccsds.encode_packet(ccsds.CcsdsPacket.make(0x1B0, b"\x03")), link)
    assert ci.rejected == 3
    assert not n.counters
    assert len(k.trace.select(kind="CI_REJECT")) == 3


def test_ci_echoes_probe_without_publishing():
    k, n, peer, link = wired_node()
    n.register_app(CiApp())
    n.power_on(0)
    k.run()
    n.receive(ccsds.encode_packet(ccsds.CcsdsPacket.make(0x1B3, bytes(12), 0, ccsds.PacketType.COMMAND)), link)
    k.run()
    assert ccsds.decode_packet(peer.got[0]).apid == 0x1A3
    assert "WIFI_PROBE" not in n.counters


def test_crashed_node_is_silent():
    k, n, peer, link = wired_node()
    app, seen = recorder("A", ["WAKEUP_IMU"])
    n.schedule = ScheduleTable([ScheduleEntry("WAKEUP_IMU", 25_000)])
    n.register_app(app)
    n.power_on(0)
    k.schedule(100_000, n.crash)
    k.run(until=1_000_000)
    assert len(seen) == 4
    n.receive(b"junk", link)
    assert k.trace.select(kind="RX_DEAD")
