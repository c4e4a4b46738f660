import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from eaglecam.ccsds import PacketType
from eaglecam.messages import (
    WIRE_CODECS,
    BatterySnapshot,
    BatteryStatus,
    CmdAck,
    FlagKind,
    HealthStatusReport,
    ImuBatch,
    ImuSample,
    MessageDef,
    MessageId,
    MessageKind,
    MessageMap,
    PayloadError,
    PhaseFlag,
    UnknownMessageId,
    WifiProbe,
    default_message_map,
)


def test_mission_apids():
    mm = default_message_map()
    assert mm["BATTERY_STATUS"].apid == 0x1A0
    assert mm["IMU_TLM"].apid == 0x1A1
    assert mm["FILESYNC"].apid == 0x1A2
    assert mm["PHASE_FLAG"].apid == 0x1B0
    assert mm["HS_REPORT"].apid == 0x1B1
    assert mm["PHASE_FLAG"].packet_type is PacketType.COMMAND
    assert str(mm["HS_REPORT"].msg_id) == "0x1B1"


def test_wakeups_are_local_and_in_range():
    for d in default_message_map():
        if d.msg_id.kind is MessageKind.WAKEUP:
            assert 0x010 <= d.apid <= 0x01F
            assert not d.wire


def test_every_wire_message_has_a_codec_except_filesync():
    for d in default_message_map():
        if d.wire and d.name != "FILESYNC":
            assert d.name in WIRE_CODECS


def test_downlink_marking():
    mm = default_message_map()
    assert {d.name for d in mm.downlinked_by("eaglecam")} == {"BATTERY_STATUS", "IMU_TLM"}
    assert {d.name for d in mm.downlinked_by("deployer")} == {"HS_REPORT"}


def test_unknown_name():
    with pytest.raises(UnknownMessageId):
        default_message_map()["NOPE"]


def test_map_rejects_duplicate_apid():
    a = MessageDef("A", MessageId(0x100, MessageKind.TELEMETRY), True)
    b = MessageDef("B", MessageId(0x100, MessageKind.COMMAND), True)
    with pytest.raises(ValueError):
        MessageMap([a, b])


def test_map_rejects_wire_wakeup():
    with pytest.raises(ValueError):
        MessageMap([MessageDef("W", MessageId(0x010, MessageKind.WAKEUP), True)])


def test_health_status_layout_is_four_fields_in_order():
    b = BatterySnapshot(8.0, -0.1, 0.9, 20.5)
    r = HealthStatusReport(True, False, b, 1_572_864)
    raw = r.pack()
    assert len(raw) == HealthStatusReport.SIZE == 18
    assert raw[:2] == b"\x01\x00"
    assert struct.unpack(">HhHh", raw[2:10]) == (8000, -100, 900, 2050)
    assert struct.unpack(">Q", raw[10:]) == (1_572_864,)
    back = HealthStatusReport.unpack(raw)
    assert back == HealthStatusReport(True, False, b, 1_572_864)
    assert list(back.as_fields()) == ["wifi_connected", "wifi_chip_ok", "battery", "data_folder_bytes"]


def test_health_status_rejects_bad_sizes_and_bools():
    with pytest.raises(PayloadError):
        HealthStatusReport.unpack(bytes(17))
    with pytest.raises(PayloadError):
        HealthStatusReport.unpack(b"\x02" + bytes(17))


def test_zeroed_battery_is_stale():
    assert BatterySnapshot.zeroed().stale
    assert not BatterySnapshot(7.0, 1.0, 0.5, 20.0).stale


def test_phase_flag_roundtrip_and_unknown_kind():
    f = PhaseFlag(FlagKind.DEPLOYED, 46_666_667)
    assert PhaseFlag.unpack(f.pack()) == f
    with pytest.raises(PayloadError):
        PhaseFlag.unpack(b"\x09" + bytes(8))
    with pytest.raises(PayloadError):
        PhaseFlag.unpack(b"\x03")


def test_small_codecs_roundtrip():
    assert CmdAck.unpack(CmdAck(0x1B0, 7, 3).pack()) == CmdAck(0x1B0, 7, 3)
    assert WifiProbe.unpack(WifiProbe(9, 123).pack()) == WifiProbe(9, 123)
    s = BatteryStatus(5, BatterySnapshot(8.4, 1.8, 1.0, 20.0))
    assert BatteryStatus.unpack(s.pack()) == s


def test_imu_batch_roundtrip():
    samples = tuple(ImuSample(i * 25_000, (0.0, 0.0, 1.5), (0.0, 0.5, 0.0), (1.0, 2.0, 4.0)) for i in range(40))
    batch = ImuBatch(3, samples)
    raw = batch.pack()
    assert len(raw) == 6 + 40 * 44
    assert ImuBatch.unpack(raw) == batch
    with pytest.raises(PayloadError):
        ImuBatch.unpack(raw[:-1])


finite = st.floats(-1000, 1000, allow_nan=False, width=32)


@given(st.booleans(), st.booleans(), st.floats(0, 60), st.floats(-30, 30), st.floats(0, 1),
       st.floats(-300, 300), st.integers(0, 2**64 - 1))
def test_health_status_roundtrip_property(conn, chip, v, i, soc, temp, folder):
    b = BatterySnapshot(v, i, soc, temp).quantized()
    r = HealthStatusReport(conn, chip, b, folder)
    assert HealthStatusReport.unpack(r.pack()) == r


@given(st.integers(0, 2**64 - 1), st.tuples(finite, finite, finite))
def test_imu_sample_roundtrip_property(t, v):
    s = ImuSample(t, v, v, v)
    assert ImuSample.unpack(s.pack()) == s
