"""Software stand-ins for the CubeSat devices: IMU, NISA cameras, ArduCams, EDS, battery.

Image files are synthetic: a 32-byte metadata header followed by seeded
pseudo-random payload bytes. Layout of the header (big-endian)::

    0   4s  magic "ECIM"
    4   B   camera id
    5   I   sequence number
    9   Q   capture time, us
    17  H   lens occlusion, milli-units (ArduCam only, else 0)
    19  I   payload size, bytes
    23  B   camera kind (0 = NISA, 1 = ArduCam)
    24  8x  reserved
"""

from __future__ import annotations

import math
import random
import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .kernel import SimKernel
from .lander import LUNAR_G, Kinematics
from .messages import BatterySnapshot, ImuSample

IMAGE_MAGIC = b"ECIM"
IMAGE_HEADER = struct.Struct(">4sBIQHIB8x")
IMAGE_HEADER_LEN = IMAGE_HEADER.size
KIND_NISA = 0
KIND_ARDUCAM = 1


class PeripheralError(RuntimeError):
    pass


class Disabled(PeripheralError):
    pass


class AlreadyCapturing(PeripheralError):
    pass


class NoSuchFile(PeripheralError):
    pass


class RangeBeyondEof(PeripheralError):
    pass


class NotInitialized(PeripheralError):
    pass


@dataclass(frozen=True)
class ImageMeta:
    camera_id: int
    seq: int
    t: int
    occlusion: float
    payload_size: int
    kind: int

    def pack(self) -> bytes:
        milli = max(0, min(1000, round(self.occlusion * 1000)))
        return IMAGE_HEADER.pack(IMAGE_MAGIC, self.camera_id, self.seq, self.t, milli,
                                 self.payload_size, self.kind)

    @classmethod
    def unpack(cls, data: bytes) -> ImageMeta:
        if len(data) < IMAGE_HEADER_LEN:
            raise ValueError("image shorter than its header")
        magic, cam, seq, t, milli, size, kind = IMAGE_HEADER.unpack_from(data)
        if magic != IMAGE_MAGIC:
            raise ValueError(f"bad image magic {magic!r}")
        return cls(cam, seq, t, milli / 1000.0, size, kind)


def synthetic_bytes(seed: int, offset: int, length: int) -> bytes:
    """Bytes [offset, offset+length) of the pseudo-random stream for ``seed``."""
    if length <= 0:
        return b""
    first_word = offset // 8
    last_word = (offset + length + 7) // 8
    bg = np.random.PCG64(seed)
    bg.advance(first_word)
    words = bg.random_raw(last_word - first_word).astype("<u8")
    skip = offset - first_word * 8
    return words.tobytes()[skip : skip + length]


class SyntheticImage:
    """Read-only image file whose payload is generated on demand from a seed."""

    def __init__(self, name: str, meta: ImageMeta, seed: int):
        self.name = name
        self.meta = meta
        self.seed = seed
        self._header = meta.pack()
        self.size = IMAGE_HEADER_LEN + meta.payload_size

    def read(self, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0 or offset + length > self.size:
            raise RangeBeyondEof(f"{self.name}: [{offset}, {offset + length}) beyond {self.size} bytes")
        out = b""
        if offset < IMAGE_HEADER_LEN:
            out = self._header[offset : min(IMAGE_HEADER_LEN, offset + length)]
        p_off = max(0, offset - IMAGE_HEADER_LEN)
        p_len = length - len(out)
        return out + synthetic_bytes(self.seed, p_off, p_len)

    def content(self) -> bytes:
        return self.read(0, self.size)


# -- IMU ---------------------------------------------------------------------

ATTACHED, FREEFALL, IMPACT, LANDED = "attached", "freefall", "impact", "landed"


class ImuSim:
    """9-DOF sensor; acceleration follows the kinematic regime."""

    def __init__(self, rng: random.Random, rate_hz: float = 40.0, g: float = LUNAR_G,
                 accel_noise: float = 0.005, spike_accel: float = 120.0):
        self.rng = rng
        self.rate_hz = rate_hz
        self.g = g
        self.accel_noise = accel_noise
        self.spike_accel = spike_accel
        self.enabled = False
        self.glitches: set[int] = set()  # sample times forced to a spike (fault injection)
        self.blind = False  # sensor fault: never reports the impact spike

    def imu_read(self, regime: str, t: int) -> ImuSample:
        if not self.enabled:
            raise Disabled("IMU is not enabled")
        n = self.rng.gauss
        s = self.accel_noise
        if (regime == IMPACT and not self.blind) or t in self.glitches:
            base = (0.0, 0.0, self.spike_accel)
        elif regime == FREEFALL:
            base = (0.0, 0.0, 0.0)
        elif regime in (ATTACHED, LANDED, IMPACT):
            base = (0.0, 0.0, self.g)
        else:
            raise ValueError(f"unknown regime {regime!r}")
        accel = (base[0] + n(0, s), base[1] + n(0, s), base[2] + n(0, s))
        gyro = (n(0, 0.002), n(0, 0.002), n(0, 0.002))
        mag = (0.12 + n(0, 0.01), -0.31 + n(0, 0.01), 0.22 + n(0, 0.01))
        return ImuSample(t, accel, gyro, mag)


# -- NISA ----------------------------------------------------------------------


class NisaCameraSim:
    """A NISA camera OBC: captures frames while triggered and serves them read-only."""

    fov_deg = 186

    def __init__(self, camera_id: int, seed_for: Callable[[str], int],
                 frame_period: int = 200_000, frame_size: int = 512 * 1024):
        if frame_size <= IMAGE_HEADER_LEN:
            raise ValueError("frame must be larger than its header")
        self.id = camera_id
        self.seed_for = seed_for
        self.frame_period = frame_period
        self.frame_size = frame_size
        self.capturing = False
        self.trigger_time: Optional[int] = None
        self.stop_time: Optional[int] = None
        self.store: dict[str, SyntheticImage] = {}
        self._produced = 0
        self.trigger_failures_left = 0

    @staticmethod
    def filename(camera_id: int, seq: int) -> str:
        return f"nisa{camera_id}_{seq:06d}.img"

    def nisa_trigger(self, now: int) -> bool:
        if self.capturing:
            raise AlreadyCapturing(f"NISA {self.id} is already capturing")
        if self.trigger_failures_left > 0:
            self.trigger_failures_left -= 1
            return False
        self.capturing = True
        self.trigger_time = now
        return True

    def stop(self, now: int) -> None:
        self.advance(now)
        if self.capturing:
            self.capturing = False
            self.stop_time = now

    def advance(self, now: int) -> None:
        """Materialize frames whose capture time has passed."""
        if self.trigger_time is None:
            return
        end = now if self.capturing else min(now, self.stop_time)
        while True:
            t = self.trigger_time + (self._produced + 1) * self.frame_period
            if t > end:
                break
            seq = self._produced
            name = self.filename(self.id, seq)
            meta = ImageMeta(self.id, seq, t, 0.0, self.frame_size - IMAGE_HEADER_LEN, KIND_NISA)
            self.store[name] = SyntheticImage(name, meta, self.seed_for(f"nisa/{self.id}/{seq}"))
            self._produced += 1

    def list_files(self, now: int) -> list[str]:
        self.advance(now)
        return list(self.store)

    def nisa_serve_file(self, name: str, offset: int, length: int) -> bytes:
        image = self.store.get(name)
        if image is None:
            raise NoSuchFile(name)
        return image.read(offset, length)


# -- dust, EDS, ArduCam -----------------------------------------------------------


def dust_step(occlusion: float, dt: float, eds_active: bool, removal_rate: float,
              settle_add: float = 0.0) -> float:
    """Advance lens occlusion by ``dt`` seconds: settling dust first, then EDS removal."""
    o = min(1.0, occlusion + max(0.0, settle_add))
    if eds_active:
        o *= math.exp(-removal_rate * dt)
    return max(0.0, o)


class EdsActuator:
    """Dust shield driven by a single GPIO line."""

    def __init__(self, removal_rate: float = 0.2):
        if removal_rate < 0:
            raise ValueError("removal rate must be non-negative")
        self.removal_rate = removal_rate
        self.active = False
        self._listeners: list[Callable[[int], None]] = []
        self.history: list[tuple[int, bool]] = []

    def on_change(self, fn: Callable[[int], None]) -> None:
        self._listeners.append(fn)

    def gpio_write(self, level: bool, now: int) -> None:
        if level == self.active:
            return
        for fn in self._listeners:
            fn(now)  # settle all lenses up to the switch instant under the old state
        self.active = level
        self.history.append((now, level))


@dataclass(frozen=True)
class ImageRecord:
    name: str
    data: bytes
    occlusion: float
    t: int


class ArduCamSim:
    def __init__(self, camera_id: int, eds: EdsActuator, seed_for: Callable[[str], int],
                 frame_size: int = 256 * 1024, settle_amount: float = 0.8,
                 settle_window: int = 5_000_000):
        self.id = camera_id
        self.eds = eds
        self.seed_for = seed_for
        self.frame_size = frame_size
        self.settle_amount = settle_amount
        self.settle_window = settle_window
        self.initialized = False
        self.occlusion = 0.0
        self._t = 0
        self._settle_start: Optional[int] = None
        self._settled = 0.0
        self._seq = 0
        eds.on_change(self.advance)

    def init(self, now: int) -> None:
        self.advance(now)
        self.initialized = True

    def dust_event(self, now: int) -> None:
        """Regolith starts settling on the lens (landing)."""
        self.advance(now)
        if self._settle_start is None:
            self._settle_start = now

    def _settle_end(self) -> Optional[int]:
        if self._settle_start is None:
            return None
        return self._settle_start + self.settle_window

    def advance(self, now: int) -> float:
        if now < self._t:
            return self.occlusion
        end = self._settle_end()
        cuts = [now]
        if end is not None and self._t < end < now:
            cuts.insert(0, end)
        for cut in cuts:
            self._dust_to(cut)
        return self.occlusion

    def _dust_to(self, t: int) -> None:
        dt_us = t - self._t
        if dt_us <= 0:
            return
        add = 0.0
        end = self._settle_end()
        if end is not None and self._t < end and self._settled < self.settle_amount:
            window = max(1, self.settle_window)
            add = min(self.settle_amount - self._settled, self.settle_amount * dt_us / window)
            self._settled += add
        self.occlusion = dust_step(self.occlusion, dt_us / 1e6, self.eds.active,
                                   self.eds.removal_rate, add)
        self._t = t

    def arducam_capture(self, now: int) -> ImageRecord:
        if not self.initialized:
            raise NotInitialized(f"ArduCam {self.id} not initialized")
        occlusion = self.advance(now)
        seq = self._seq
        self._seq += 1
        name = f"arducam{self.id}_{seq:06d}.img"
        meta = ImageMeta(self.id, seq, now, occlusion, self.frame_size - IMAGE_HEADER_LEN, KIND_ARDUCAM)
        img = SyntheticImage(name, meta, self.seed_for(f"arducam/{self.id}/{seq}"))
        return ImageRecord(name, img.content(), occlusion, now)


# -- battery -------------------------------------------------------------------------


class BatterySim:
    """Li-ion pack read over I2C; charge falls linearly with powered-on time."""

    def __init__(self, discharge_pct_per_min: float = 1.0, v_min: float = 6.0, v_max: float = 8.4,
                 current: float = 1.8, temp: float = 20.0):
        self.discharge_pct_per_min = discharge_pct_per_min
        self.v_min = v_min
        self.v_max = v_max
        self.current = current
        self.temp = temp
        self.power_on_time: Optional[int] = None

    def power_on(self, now: int) -> None:
        self.power_on_time = now

    def battery_read(self, now: int) -> BatterySnapshot:
        if self.power_on_time is None:
            elapsed_min = 0.0
        else:
            elapsed_min = (now - self.power_on_time) / 60e6
        soc = min(1.0, max(0.0, 1.0 - self.discharge_pct_per_min / 100.0 * elapsed_min))
        voltage = self.v_min + (self.v_max - self.v_min) * soc
        voltage = min(self.v_max, max(self.v_min, voltage))
        return BatterySnapshot(voltage, self.current, soc, self.temp + 5.0 * (1.0 - soc))


class EagleCamHardware:
    """Everything bolted to the EagleCam OBC, plus the physics it senses."""

    def __init__(self, kernel: SimKernel, kinematics: Kinematics, cfg: Optional[dict] = None):
        cfg = cfg or {}
        self.kinematics = kinematics
        self.imu = ImuSim(kernel.rng("imu"), rate_hz=cfg.get("imu.rate_hz", 40.0), g=kinematics.g,
                          spike_accel=cfg.get("imu.spike_accel_mps2", 120.0))
        self.imu.blind = bool(cfg.get("imu.blind", False))
        fps = cfg.get("nisa.fps", 5.0)
        frame = int(cfg.get("nisa.frame_kib", 512) * 1024)
        self.nisa = [NisaCameraSim(i, kernel.seed_for, int(round(1e6 / fps)), frame) for i in (1, 2, 3)]
        self.eds = EdsActuator(cfg.get("dust.removal_rate", 0.2))
        arducam_frame = int(cfg.get("arducam.frame_kib", 256) * 1024)
        self.arducams = [
            ArduCamSim(i, self.eds, kernel.seed_for, arducam_frame, cfg.get("dust.settle", 0.8),
                       int(cfg.get("dust.settle_window_s", 5.0) * 1e6))
            for i in (1, 2)
        ]
        self.battery = BatterySim(cfg.get("battery.discharge_pct_per_min", 1.0))

    def regime(self, t: int) -> str:
        return self.kinematics.regime(t)
