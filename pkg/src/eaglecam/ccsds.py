"""CCSDS space packet primary header codec (unsegmented, no secondary header).

Bit layout of the 6-byte primary header, big-endian::

    [3]  version      always 0
    [1]  packet_type  0 = telemetry, 1 = command
    [1]  sec_hdr_flag
    [11] apid
    [2]  seq_flags    0b11 = unsegmented
    [14] seq_count
    [16] data_length  payload octets - 1
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

HEADER_LEN = 6
MAX_PAYLOAD = 65536
SEQ_MODULUS = 1 << 14
UNSEGMENTED = 0b11

_HEADER = struct.Struct(">HHH")


class CcsdsError(ValueError):
    pass


class PayloadEmpty(CcsdsError):
    pass


class PayloadTooLarge(CcsdsError):
    pass


class Truncated(CcsdsError):
    pass


class BadVersion(CcsdsError):
    pass


class PacketType(IntEnum):
    TELEMETRY = 0
    COMMAND = 1


@dataclass(frozen=True)
class CcsdsPrimaryHeader:
    apid: int
    seq_count: int = 0
    packet_type: PacketType = PacketType.TELEMETRY
    sec_hdr_flag: int = 0
    seq_flags: int = UNSEGMENTED
    version: int = 0
    data_length: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.apid < 0x800:
            raise CcsdsError(f"apid out of range: {self.apid}")
        if not 0 <= self.seq_count < SEQ_MODULUS:
            raise CcsdsError(f"seq_count out of range: {self.seq_count}")
        if self.sec_hdr_flag not in (0, 1) or not 0 <= self.seq_flags <= 3:
            raise CcsdsError("flag field out of range")
        if not 0 <= self.version <= 7 or not 0 <= self.data_length <= 0xFFFF:
            raise CcsdsError("version or data_length out of range")


@dataclass(frozen=True)
class CcsdsPacket:
    header: CcsdsPrimaryHeader
    payload: bytes

    @classmethod
    def make(
        cls,
        apid: int,
        payload: bytes,
        seq_count: int = 0,
        packet_type: PacketType = PacketType.TELEMETRY,
    ) -> CcsdsPacket:
        """Build a packet whose data_length is derived from the payload."""
        if not payload:
            raise PayloadEmpty("CCSDS packets need at least one payload octet")
        if len(payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
        header = CcsdsPrimaryHeader(
            apid=apid,
            seq_count=seq_count,
            packet_type=PacketType(packet_type),
            data_length=len(payload) - 1,
        )
        return cls(header, bytes(payload))

    @property
    def apid(self) -> int:
        return self.header.apid


def encode_packet(packet: CcsdsPacket) -> bytes:
    payload = packet.payload
    if not payload:
        raise PayloadEmpty("CCSDS packets need at least one payload octet")
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    h = packet.header
    if h.data_length != len(payload) - 1:
        raise CcsdsError(
            f"header data_length {h.data_length} does not match payload length {len(payload)}"
        )
    word0 = (h.version << 13) | (int(h.packet_type) << 12) | (h.sec_hdr_flag << 11) | h.apid
    word1 = (h.seq_flags << 14) | h.seq_count
    return _HEADER.pack(word0, word1, h.data_length) + payload


def decode_header(data: bytes) -> CcsdsPrimaryHeader:
    if len(data) < HEADER_LEN:
        raise Truncated(f"need {HEADER_LEN} header bytes, got {len(data)}")
    word0, word1, length = _HEADER.unpack_from(data)
    version = word0 >> 13
    if version != 0:
        raise BadVersion(f"unsupported packet version {version}")
    return CcsdsPrimaryHeader(
        apid=word0 & 0x7FF,
        seq_count=word1 & 0x3FFF,
        packet_type=PacketType((word0 >> 12) & 1),
        sec_hdr_flag=(word0 >> 11) & 1,
        seq_flags=word1 >> 14,
        version=version,
        data_length=length,
    )


def decode_packet(data: bytes) -> CcsdsPacket:
    if len(data) < HEADER_LEN + 1:
        raise Truncated(f"packet of {len(data)} bytes is shorter than the 7-byte minimum")
    header = decode_header(data)
    if len(data) != HEADER_LEN + header.data_length + 1:
        raise Truncated(
            f"header declares {header.data_length + 1} payload bytes, "
            f"{len(data) - HEADER_LEN} present"
        )
    return CcsdsPacket(header, bytes(data[HEADER_LEN:]))


def next_seq(counter: int) -> int:
    return (counter + 1) % SEQ_MODULUS


class SequenceCounters:
    """Per-APID sequence counters for one sender."""

    def __init__(self) -> None:
        self._next: dict[int, int] = {}

    def take(self, apid: int) -> int:
        seq = self._next.get(apid, 0)
        self._next[apid] = next_seq(seq)
        return seq
