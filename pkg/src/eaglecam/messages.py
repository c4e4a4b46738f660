"""Mission message map and the byte layouts of every wire payload.

All multi-byte payload fields are big-endian.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum, IntEnum
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .ccsds import PacketType


class UnknownMessageId(KeyError):
    pass


class MessageKind(Enum):
    TELEMETRY = "telemetry"
    COMMAND = "command"
    WAKEUP = "wakeup"


@dataclass(frozen=True)
class MessageId:
    apid: int
    kind: MessageKind

    def __str__(self) -> str:
        return f"0x{self.apid:03X}"


@dataclass(frozen=True)
class MessageDef:
    name: str
    msg_id: MessageId
    wire: bool
    downlink: tuple[str, ...] = ()

    @property
    def apid(self) -> int:
        return self.msg_id.apid

    @property
    def packet_type(self) -> PacketType:
        if self.msg_id.kind is MessageKind.COMMAND:
            return PacketType.COMMAND
        return PacketType.TELEMETRY


class MessageMap:
    def __init__(self, defs: list[MessageDef]):
        self._by_name: dict[str, MessageDef] = {}
        self._by_apid: dict[int, MessageDef] = {}
        for d in defs:
            if d.name in self._by_name:
                raise ValueError(f"duplicate message name {d.name}")
            if d.apid in self._by_apid:
                raise ValueError(
                    f"APID 0x{d.apid:03X} used by both {self._by_apid[d.apid].name} and {d.name}"
                )
            if d.msg_id.kind is MessageKind.WAKEUP and not 0x010 <= d.apid <= 0x01F:
                raise ValueError(f"wakeup {d.name} outside 0x010-0x01F")
            if d.msg_id.kind is MessageKind.WAKEUP and d.wire:
                raise ValueError(f"wakeup {d.name} cannot be a wire message")
            self._by_name[d.name] = d
            self._by_apid[d.apid] = d

    def __getitem__(self, name: str) -> MessageDef:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownMessageId(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __iter__(self):
        return iter(self._by_name.values())

    def by_apid(self, apid: int) -> Optional[MessageDef]:
        return self._by_apid.get(apid)

    def downlinked_by(self, node: str) -> list[MessageDef]:
        return [d for d in self._by_name.values() if node in d.downlink]


def load_message_map(path: Optional[Path] = None) -> MessageMap:
    if path is None:
        text = resources.files("eaglecam").joinpath("data/message_map.yaml").read_text()
    else:
        text = Path(path).read_text()
    raw = yaml.safe_load(text)["messages"]
    defs = []
    for name, entry in raw.items():
        defs.append(
            MessageDef(
                name=name,
                msg_id=MessageId(int(entry["apid"]), MessageKind(entry["kind"])),
                wire=entry.get("scope", "local") == "wire",
                downlink=tuple(entry.get("downlink", ())),
            )
        )
    return MessageMap(defs)


_DEFAULT_MAP: Optional[MessageMap] = None


def default_message_map() -> MessageMap:
    global _DEFAULT_MAP
    if _DEFAULT_MAP is None:
        _DEFAULT_MAP = load_message_map()
    return _DEFAULT_MAP


# -- payloads ---------------------------------------------------------------


class PayloadError(ValueError):
    pass


def _unpack(fmt: struct.Struct, data: bytes, what: str) -> tuple:
    if len(data) != fmt.size:
        raise PayloadError(f"{what} payload must be {fmt.size} bytes, got {len(data)}")
    return fmt.unpack(data)


class FlagKind(IntEnum):
    """Nova-C software flags, numbered by the mission phase they open."""

    POWER_ON = 2
    START_CAPTURE = 3
    DEPLOYED = 4


@dataclass(frozen=True)
class PhaseFlag:
    kind: FlagKind
    issued_at: int

    _FMT = struct.Struct(">BQ")

    def pack(self) -> bytes:
        return self._FMT.pack(int(self.kind), self.issued_at)

    @classmethod
    def unpack(cls, data: bytes) -> PhaseFlag:
        kind, issued_at = _unpack(cls._FMT, data, "phase flag")
        try:
            return cls(FlagKind(kind), issued_at)
        except ValueError:
            raise PayloadError(f"unknown flag kind {kind}") from None


@dataclass(frozen=True)
class CmdAck:
    """CI receipt echo for a command packet."""

    apid: int
    seq: int
    flag_kind: int

    _FMT = struct.Struct(">HHB")

    def pack(self) -> bytes:
        return self._FMT.pack(self.apid, self.seq, self.flag_kind)

    @classmethod
    def unpack(cls, data: bytes) -> CmdAck:
        return cls(*_unpack(cls._FMT, data, "command ack"))


@dataclass(frozen=True)
class WifiProbe:
    probe_id: int
    sent_at: int

    _FMT = struct.Struct(">IQ")

    def pack(self) -> bytes:
        return self._FMT.pack(self.probe_id, self.sent_at)

    @classmethod
    def unpack(cls, data: bytes) -> WifiProbe:
        return cls(*_unpack(cls._FMT, data, "wifi probe"))


@dataclass(frozen=True)
class BatterySnapshot:
    voltage: float
    current: float
    state_of_charge: float
    temp: float

    # u16 mV, i16 mA, u16 soc milli-units, i16 centi-degC
    _FMT = struct.Struct(">HhHh")

    def pack(self) -> bytes:
        return self._FMT.pack(
            _clamp_int(round(self.voltage * 1000), 0, 0xFFFF),
            _clamp_int(round(self.current * 1000), -0x8000, 0x7FFF),
            _clamp_int(round(self.state_of_charge * 1000), 0, 0xFFFF),
            _clamp_int(round(self.temp * 100), -0x8000, 0x7FFF),
        )

    @classmethod
    def unpack(cls, data: bytes) -> BatterySnapshot:
        mv, ma, soc, centi = _unpack(cls._FMT, data, "battery block")
        return cls(mv / 1000.0, ma / 1000.0, soc / 1000.0, centi / 100.0)

    @classmethod
    def zeroed(cls) -> BatterySnapshot:
        return cls(0.0, 0.0, 0.0, 0.0)

    @property
    def stale(self) -> bool:
        return self.voltage == 0.0

    def quantized(self) -> BatterySnapshot:
        """The snapshot as it survives a trip through the wire layout."""
        return BatterySnapshot.unpack(self.pack())


def _clamp_int(v: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, v))


BATTERY_BLOCK_LEN = BatterySnapshot._FMT.size


@dataclass(frozen=True)
class BatteryStatus:
    """EagleCam health/status as published by the Battery app (apid 0x1A0)."""

    t: int
    battery: BatterySnapshot

    _T = struct.Struct(">Q")

    def pack(self) -> bytes:
        return self.battery.pack() + self._T.pack(self.t)

    @classmethod
    def unpack(cls, data: bytes) -> BatteryStatus:
        if len(data) != BATTERY_BLOCK_LEN + 8:
            raise PayloadError(f"battery status payload must be 16 bytes, got {len(data)}")
        battery = BatterySnapshot.unpack(data[:BATTERY_BLOCK_LEN])
        (t,) = cls._T.unpack(data[BATTERY_BLOCK_LEN:])
        return cls(t, battery)


@dataclass(frozen=True)
class HealthStatusReport:
    """The four-field health/status message relayed to mission control (apid 0x1B1)."""

    wifi_connected: bool
    wifi_chip_ok: bool
    battery: BatterySnapshot
    data_folder_bytes: int

    _HEAD = struct.Struct(">BB")
    _TAIL = struct.Struct(">Q")
    SIZE = _HEAD.size + BATTERY_BLOCK_LEN + _TAIL.size

    def pack(self) -> bytes:
        return (
            self._HEAD.pack(int(self.wifi_connected), int(self.wifi_chip_ok))
            + self.battery.pack()
            + self._TAIL.pack(self.data_folder_bytes)
        )

    @classmethod
    def unpack(cls, data: bytes) -> HealthStatusReport:
        if len(data) != cls.SIZE:
            raise PayloadError(f"H&S payload must be {cls.SIZE} bytes, got {len(data)}")
        connected, chip = cls._HEAD.unpack_from(data)
        if connected > 1 or chip > 1:
            raise PayloadError("boolean H&S field holds a value other than 0/1")
        battery = BatterySnapshot.unpack(data[2 : 2 + BATTERY_BLOCK_LEN])
        (folder,) = cls._TAIL.unpack_from(data, 2 + BATTERY_BLOCK_LEN)
        return cls(bool(connected), bool(chip), battery, folder)

    def as_fields(self) -> dict:
        return {
            "wifi_connected": self.wifi_connected,
            "wifi_chip_ok": self.wifi_chip_ok,
            "battery": {
                "voltage": self.battery.voltage,
                "current": self.battery.current,
                "state_of_charge": self.battery.state_of_charge,
                "temp": self.battery.temp,
                "stale": self.battery.stale,
            },
            "data_folder_bytes": self.data_folder_bytes,
        }


@dataclass(frozen=True)
class ImuSample:
    t: int
    accel: tuple[float, float, float]
    gyro: tuple[float, float, float]
    mag: tuple[float, float, float]

    _FMT = struct.Struct(">Q9f")
    SIZE = _FMT.size

    def pack(self) -> bytes:
        return self._FMT.pack(self.t, *self.accel, *self.gyro, *self.mag)

    @classmethod
    def unpack(cls, data: bytes) -> ImuSample:
        t, *v = _unpack(cls._FMT, data, "IMU record")
        return cls(t, tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]))

    @property
    def accel_magnitude(self) -> float:
        return math.sqrt(sum(a * a for a in self.accel))


@dataclass(frozen=True)
class ImuBatch:
    evictions: int
    samples: tuple[ImuSample, ...]

    _HEAD = struct.Struct(">HI")

    def pack(self) -> bytes:
        return self._HEAD.pack(len(self.samples), self.evictions) + b"".join(
            s.pack() for s in self.samples
        )

    @classmethod
    def unpack(cls, data: bytes) -> ImuBatch:
        if len(data) < cls._HEAD.size:
            raise PayloadError("IMU batch shorter than its header")
        count, evictions = cls._HEAD.unpack_from(data)
        body = data[cls._HEAD.size :]
        if len(body) != count * ImuSample.SIZE:
            raise PayloadError(f"IMU batch declares {count} records, body is {len(body)} bytes")
        samples = tuple(
            ImuSample.unpack(body[i : i + ImuSample.SIZE])
            for i in range(0, len(body), ImuSample.SIZE)
        )
        return cls(evictions, samples)


# Payload codec per wire message name. FILESYNC is handled by the sync service.
WIRE_CODECS: dict[str, type] = {
    "BATTERY_STATUS": BatteryStatus,
    "IMU_TLM": ImuBatch,
    "PHASE_FLAG": PhaseFlag,
    "HS_REPORT": HealthStatusReport,
    "CMD_ACK": CmdAck,
    "WIFI_PROBE": WifiProbe,
    "WIFI_PROBE_REPLY": WifiProbe,
}
