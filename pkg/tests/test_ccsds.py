import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eaglecam import ccsds
from eaglecam.ccsds import (
    BadVersion,
    CcsdsPacket,
    CcsdsPrimaryHeader,
    PacketType,
    PayloadEmpty,
    PayloadTooLarge,
    SequenceCounters,
    Truncated,
    decode_packet,
    encode_packet,
    next_seq,
)

from conftest import DATA


def golden():
    lines = [l for l in (DATA / "ccsds_golden.hex").read_text().splitlines() if l and not l.startswith("#")]
    fields = json.loads((DATA / "ccsds_golden.json").read_text())
    assert len(lines) == len(fields) >= 10
    return list(zip(lines, fields))


def bit_oracle(h: CcsdsPrimaryHeader) -> bytes:
    """Reference header built from a bit string, independent of the struct-based codec."""
    bits = (f"{h.version:03b}{int(h.packet_type):01b}{h.sec_hdr_flag:01b}{h.apid:011b}"
            f"{h.seq_flags:02b}{h.seq_count:014b}{h.data_length:016b}")
    return bytes(int(bits[i : i + 8], 2) for i in range(0, 48, 8))


@pytest.mark.parametrize("hexline,expected", golden())
def test_golden_vectors_decode_and_reencode(hexline, expected):
    raw = bytes.fromhex(hexline)
    p = decode_packet(raw)
    h = p.header
    assert h.version == expected["version"]
    assert int(h.packet_type) == expected["packet_type"]
    assert h.sec_hdr_flag == expected["sec_hdr_flag"]
    assert h.apid == expected["apid"]
    assert h.seq_flags == expected["seq_flags"]
    assert h.seq_count == expected["seq_count"]
    assert h.data_length == expected["data_length"]
    assert p.payload.hex() == expected["payload"]
    assert encode_packet(p) == raw


def test_spec_example_header_bytes():
    payload = bytes(range(8))
    raw = encode_packet(CcsdsPacket.make(0x1A0, payload))
    assert raw[:6] == bytes.fromhex("01A0C0000007")
    assert raw[6:] == payload
    p = decode_packet(raw)
    assert (p.apid, p.header.seq_count, p.payload) == (0x1A0, 0, payload)


def test_command_type_bit():
    raw = encode_packet(CcsdsPacket.make(0x1B0, b"\x03", 5, PacketType.COMMAND))
    assert raw[:6] == bytes.fromhex("11B0C0050000")


def test_empty_payload_rejected():
    with pytest.raises(PayloadEmpty):
        CcsdsPacket.make(0x1A0, b"")
    with pytest.raises(PayloadEmpty):
        encode_packet(CcsdsPacket(CcsdsPrimaryHeader(0x1A0), b""))


def test_payload_limits():
    assert len(encode_packet(CcsdsPacket.make(0x1A2, bytes(65536)))) == 65542
    with pytest.raises(PayloadTooLarge):
        CcsdsPacket.make(0x1A2, bytes(65537))


def test_length_mismatch_on_encode():
    with pytest.raises(ccsds.CcsdsError):
        encode_packet(CcsdsPacket(CcsdsPrimaryHeader(0x1A0, data_length=3), b"ab"))


def test_truncated_inputs():
    with pytest.raises(Truncated):
        decode_packet(bytes.fromhex("01A0C0000007"))
    # header claims 8 payload bytes, only 4 present
    with pytest.raises(Truncated):
        decode_packet(bytes.fromhex("01A0C0000007") + b"abcd")
    with pytest.raises(Truncated):
        decode_packet(bytes.fromhex("01A0C0000000") + b"ab")


def test_bad_version():
    with pytest.raises(BadVersion):
        decode_packet(bytes.fromhex("21A0C0000000") + b"a")


def test_header_field_ranges():
    with pytest.raises(ccsds.CcsdsError):
        CcsdsPrimaryHeader(0x800)
    with pytest.raises(ccsds.CcsdsError):
        CcsdsPrimaryHeader(1, seq_count=1 << 14)


def test_next_seq():
    assert next_seq(0) == 1
    assert next_seq(16383) == 0
    c = 1234
    for _ in range(16384):
        c = next_seq(c)
    assert c == 1234


def test_sequence_counters_per_apid():
    s = SequenceCounters()
    assert [s.take(0x1A0) for _ in range(3)] == [0, 1, 2]
    assert s.take(0x1A1) == 0
    assert s.take(0x1A0) == 3


headers = st.builds(
    CcsdsPrimaryHeader,
    apid=st.integers(0, 0x7FF),
    seq_count=st.integers(0, 0x3FFF),
    packet_type=st.sampled_from(list(PacketType)),
    sec_hdr_flag=st.integers(0, 1),
    seq_flags=st.integers(0, 3),
)


@settings(max_examples=300)
@given(headers, st.binary(min_size=1, max_size=600))
def test_roundtrip_and_layout_property(h, payload):
    h = CcsdsPrimaryHeader(h.apid, h.seq_count, h.packet_type, h.sec_hdr_flag, h.seq_flags, 0,
                           len(payload) - 1)
    p = CcsdsPacket(h, payload)
    raw = encode_packet(p)
    assert len(raw) == 6 + len(payload)
    assert raw[:6] == bit_oracle(h)
    assert decode_packet(raw) == p


@given(st.binary(max_size=40))
def test_decoder_never_crashes_on_noise(data):
    try:
        p = decode_packet(data)
    except ccsds.CcsdsError:
        return
    assert encode_packet(p) == data
