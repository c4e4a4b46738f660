"""Rsync-like one-way mirroring of the EagleCam staging store to the deployer.

Files are immutable once staged, so a manifest of (path, size, hash) is
enough to decide what to send; there is no rolling-checksum block matching.
Everything rides CCSDS apid 0x1A2 with a one-byte subtype. Payload layouts
(big-endian, ``path`` is a u8 length followed by UTF-8 bytes)::

    MANIFEST (0)  u8 subtype, u64 manifest_time, u16 count,
                  count x {path, u32 size, 16B hash}
    CHUNK    (1)  u8 subtype, path, u32 file_size, 16B file hash, u32 offset, data
    ACK      (2)  u8 subtype, u64 manifest_time (0 for a gap report), u16 count,
                  count x {path, u32 held, u8 complete, 16B hash (zero unless complete)}

The receiver keeps only the contiguous prefix of each file (chunks assemble
strictly by offset), so the byte count it reports is always a valid resume point.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .cfs import NodeRuntime
from .links import LinkModel, Outcome
from . import ccsds

HASH_LEN = 16
CHUNK_SIZE = 64 * 1024
# A CCSDS payload tops out at 65536 octets, so a wire chunk leaves room for its header.
WIRE_CHUNK_SIZE = CHUNK_SIZE - 128
MAX_PATH = 64
MANIFEST_BATCH = 256

SUB_MANIFEST = 0
SUB_CHUNK = 1
SUB_ACK = 2

_U8 = struct.Struct(">B")
_MAN_HEAD = struct.Struct(">BQH")
_MAN_ENTRY = struct.Struct(">I16s")
_CHUNK_MID = struct.Struct(">I16sI")
_ACK_ENTRY = struct.Struct(">IB16s")
ZERO_HASH = bytes(HASH_LEN)


def content_hash(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=HASH_LEN).digest()


class SyncWireError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    size: int
    content_hash: bytes
    complete: bool = True


class SyncManifest:
    def __init__(self, entries: Iterable[ManifestEntry] = ()):
        self.entries: list[ManifestEntry] = []
        self._index: dict[str, ManifestEntry] = {}
        for e in entries:
            if e.path in self._index:
                raise ValueError(f"duplicate manifest path {e.path}")
            self._index[e.path] = e
            self.entries.append(e)

    def get(self, path: str) -> Optional[ManifestEntry]:
        return self._index.get(path)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class ChunkTransfer:
    path: str
    offset: int
    length: int
    payload: bytes = b""


@dataclass(frozen=True)
class DeltaItem:
    path: str
    resume_offset: int
    size: int
    chunks: tuple[tuple[int, int], ...]


def compute_delta(src: SyncManifest, dst: SyncManifest, chunk_size: int = CHUNK_SIZE) -> list[DeltaItem]:
    """Files to (re)send, oldest first, each with its resume offset and chunk plan."""
    out = []
    for e in src:
        d = dst.get(e.path)
        if d is None:
            start = 0
        elif d.complete or d.size >= e.size:
            if d.size == e.size and d.content_hash == e.content_hash:
                continue
            start = 0
        else:
            start = d.size - d.size % chunk_size
        chunks = tuple(
            (off, min(chunk_size, e.size - off)) for off in range(start, e.size, chunk_size)
        )
        out.append(DeltaItem(e.path, start, e.size, chunks))
    return out


# -- stores ------------------------------------------------------------------------


@dataclass
class StagedFile:
    path: str
    data: bytes
    created_at: int
    digest: bytes

    @property
    def size(self) -> int:
        return len(self.data)


class StagingStore:
    """EagleCam outbox: staging/{nisa,arducam,imu,telemetry}/... ; files are write-once."""

    FOLDERS = ("nisa", "arducam", "imu", "telemetry")

    def __init__(self) -> None:
        self.files: dict[str, StagedFile] = {}
        self._listeners: list[Callable[[StagedFile], None]] = []

    def on_add(self, fn: Callable[[StagedFile], None]) -> None:
        self._listeners.append(fn)

    def add(self, path: str, data: bytes, now: int) -> StagedFile:
        if path.split("/", 1)[0] not in self.FOLDERS:
            raise ValueError(f"{path} is outside the staging folders")
        if len(path.encode()) > MAX_PATH:
            raise ValueError(f"path {path} longer than {MAX_PATH} bytes")
        if path in self.files:
            raise FileExistsError(path)
        f = StagedFile(path, bytes(data), now, content_hash(data))
        self.files[path] = f
        for fn in self._listeners:
            fn(f)
        return f

    def manifest(self) -> SyncManifest:
        return SyncManifest(ManifestEntry(f.path, f.size, f.digest) for f in self.files.values())

    @property
    def total_bytes(self) -> int:
        return sum(f.size for f in self.files.values())


@dataclass
class MirrorFile:
    path: str
    size: int
    digest: bytes
    buf: bytearray = field(default_factory=bytearray)
    complete: bool = False
    completed_at: Optional[int] = None
    data: Optional[bytes] = None
    resets: int = 0

    @property
    def held(self) -> int:
        return self.size if self.complete else len(self.buf)


class DeployerStore:
    """Deployer-side mirror. Partial files live in a temp area; only verified files count."""

    def __init__(self) -> None:
        self.files: dict[str, MirrorFile] = {}
        self._completed_bytes = 0
        self._listeners: list[Callable[[MirrorFile], None]] = []

    def on_complete(self, fn: Callable[[MirrorFile], None]) -> None:
        self._listeners.append(fn)

    @property
    def total_bytes(self) -> int:
        return self._completed_bytes

    def complete_files(self) -> list[MirrorFile]:
        return [f for f in self.files.values() if f.complete]

    def expect(self, path: str, size: int, digest: bytes) -> MirrorFile:
        f = self.files.get(path)
        if f is None or (not f.complete and (f.size != size or f.digest != digest)):
            f = MirrorFile(path, size, digest)
            self.files[path] = f
        return f

    def receive_chunk(self, path: str, size: int, digest: bytes, offset: int, payload: bytes,
                      now: int) -> str:
        f = self.expect(path, size, digest)
        if f.complete:
            return "duplicate"
        held = len(f.buf)
        if offset < held:
            return "duplicate"
        if offset > held:
            return "gap"
        if offset + len(payload) > size:
            f.buf.clear()
            f.resets += 1
            return "corrupt"
        f.buf += payload
        if len(f.buf) < size:
            return "appended"
        data = bytes(f.buf)
        if content_hash(data) != digest:
            f.buf.clear()
            f.resets += 1
            return "corrupt"
        f.buf = bytearray()
        f.data = data
        f.complete = True
        f.completed_at = now
        self._completed_bytes += size
        for fn in self._listeners:
            fn(f)
        return "complete"

    def state_of(self, path: str) -> ManifestEntry:
        f = self.files.get(path)
        if f is None:
            return ManifestEntry(path, 0, ZERO_HASH, False)
        if f.complete:
            return ManifestEntry(path, f.size, f.digest, True)
        return ManifestEntry(path, len(f.buf), ZERO_HASH, False)

    def manifest(self) -> SyncManifest:
        return SyncManifest(self.state_of(p) for p in self.files)


# -- wire codecs ---------------------------------------------------------------------


def _pack_path(path: str) -> bytes:
    raw = path.encode()
    if len(raw) > MAX_PATH:
        raise SyncWireError(f"path {path} too long")
    return _U8.pack(len(raw)) + raw


def _unpack_path(data: bytes, pos: int) -> tuple[str, int]:
    if pos >= len(data):
        raise SyncWireError("truncated path")
    n = data[pos]
    end = pos + 1 + n
    if end > len(data):
        raise SyncWireError("truncated path")
    try:
        return data[pos + 1 : end].decode(), end
    except UnicodeDecodeError as exc:
        raise SyncWireError(str(exc)) from None


def pack_manifest(entries: list[ManifestEntry], manifest_time: int) -> bytes:
    parts = [_MAN_HEAD.pack(SUB_MANIFEST, manifest_time, len(entries))]
    for e in entries:
        parts.append(_pack_path(e.path))
        parts.append(_MAN_ENTRY.pack(e.size, e.content_hash))
    return b"".join(parts)


def unpack_manifest(data: bytes) -> tuple[int, list[ManifestEntry]]:
    try:
        sub, t, count = _MAN_HEAD.unpack_from(data)
    except struct.error as exc:
        raise SyncWireError(str(exc)) from None
    if sub != SUB_MANIFEST:
        raise SyncWireError("not a manifest")
    pos = _MAN_HEAD.size
    out = []
    for _ in range(count):
        path, pos = _unpack_path(data, pos)
        if pos + _MAN_ENTRY.size > len(data):
            raise SyncWireError("truncated manifest entry")
        size, digest = _MAN_ENTRY.unpack_from(data, pos)
        pos += _MAN_ENTRY.size
        out.append(ManifestEntry(path, size, digest))
    if pos != len(data):
        raise SyncWireError("trailing bytes after manifest")
    return t, out


def pack_chunk(path: str, size: int, digest: bytes, offset: int, payload: bytes) -> bytes:
    return _U8.pack(SUB_CHUNK) + _pack_path(path) + _CHUNK_MID.pack(size, digest, offset) + payload


def unpack_chunk(data: bytes) -> tuple[str, int, bytes, int, bytes]:
    if not data or data[0] != SUB_CHUNK:
        raise SyncWireError("not a chunk")
    path, pos = _unpack_path(data, 1)
    if pos + _CHUNK_MID.size > len(data):
        raise SyncWireError("truncated chunk header")
    size, digest, offset = _CHUNK_MID.unpack_from(data, pos)
    return path, size, digest, offset, data[pos + _CHUNK_MID.size :]


def pack_ack(entries: list[ManifestEntry], manifest_time: int) -> bytes:
    parts = [_MAN_HEAD.pack(SUB_ACK, manifest_time, len(entries))]
    for e in entries:
        parts.append(_pack_path(e.path))
        parts.append(_ACK_ENTRY.pack(e.size, int(e.complete), e.content_hash))
    return b"".join(parts)


def unpack_ack(data: bytes) -> tuple[int, list[ManifestEntry]]:
    try:
        sub, t, count = _MAN_HEAD.unpack_from(data)
    except struct.error as exc:
        raise SyncWireError(str(exc)) from None
    if sub != SUB_ACK:
        raise SyncWireError("not an ack")
    pos = _MAN_HEAD.size
    out = []
    for _ in range(count):
        path, pos = _unpack_path(data, pos)
        if pos + _ACK_ENTRY.size > len(data):
            raise SyncWireError("truncated ack entry")
        held, complete, digest = _ACK_ENTRY.unpack_from(data, pos)
        pos += _ACK_ENTRY.size
        out.append(ManifestEntry(path, held, digest, bool(complete)))
    if pos != len(data):
        raise SyncWireError("trailing bytes after ack")
    return t, out


def subtype_of(payload: bytes) -> int:
    if not payload:
        raise SyncWireError("empty filesync payload")
    return payload[0]


# -- services -----------------------------------------------------------------------------


@dataclass
class TransferReport:
    t: int
    manifest_entries: int
    chunks_sent: int
    bytes_sent: int


@dataclass
class SyncStats:
    manifests_sent: int = 0
    acks_received: int = 0
    chunks_sent: int = 0
    chunks_rejected: int = 0
    bytes_sent: int = 0
    rewinds: int = 0


class SyncSender:
    """EagleCam side. Runs from boot as an OS process next to the cFS instance.

    Every ``period`` it sends the manifest of files not yet confirmed at the
    deployer; in between it streams chunks oldest file first, keeping the link
    transmit queue under ``max_backlog`` so small telemetry is not starved.
    """

    def __init__(self, staging: StagingStore, link_name: str = "wifi", period: int = 1_000_000,
                 pace: int = 50_000, chunk_size: int = WIRE_CHUNK_SIZE, max_backlog: int = 100_000):
        if chunk_size <= 0 or chunk_size > WIRE_CHUNK_SIZE:
            raise ValueError(f"chunk size must be in (0, {WIRE_CHUNK_SIZE}]")
        self.staging = staging
        self.link_name = link_name
        self.period = period
        self.pace = pace
        self.chunk_size = chunk_size
        self.max_backlog = max_backlog
        self.node: Optional[NodeRuntime] = None
        self.pending: list[str] = []
        self.confirmed: set[str] = set()
        self.cursor: dict[str, int] = {}
        self.last_sent_at: dict[str, int] = {}
        self.stats = SyncStats()
        self.reports: list[TransferReport] = []
        self._cycle_chunks = 0
        self._cycle_bytes = 0
        self._next_manifest = 0
        staging.on_add(self._staged)

    def _staged(self, f: StagedFile) -> None:
        self.pending.append(f.path)
        self.cursor[f.path] = 0

    def start(self, node: NodeRuntime) -> None:
        self.node = node
        node.packet_routes[node.message_map["FILESYNC"].apid] = self.on_packet
        self._next_manifest = node.now
        self._pace_step()

    @property
    def link(self) -> LinkModel:
        return self.node.links[self.link_name]

    def _pace_step(self) -> None:
        node = self.node
        if not node.alive:
            return
        if node.now >= self._next_manifest:
            self.sync_cycle(node.now)
            self._next_manifest += self.period
        self._stream()
        node.call_later(self.pace, self._pace_step)

    def sync_cycle(self, now: int) -> TransferReport:
        """Close out the previous cycle's accounting and send a fresh manifest."""
        entries = [self._entry(p) for p in self.pending]
        for i in range(0, max(1, len(entries)), MANIFEST_BATCH):
            batch = entries[i : i + MANIFEST_BATCH]
            self.node.transmit(self.link_name, "FILESYNC", pack_manifest(batch, now))
            self.stats.manifests_sent += 1
        report = TransferReport(now, len(entries), self._cycle_chunks, self._cycle_bytes)
        self.reports.append(report)
        self._cycle_chunks = 0
        self._cycle_bytes = 0
        return report

    def _entry(self, path: str) -> ManifestEntry:
        f = self.staging.files[path]
        return ManifestEntry(path, f.size, f.digest)

    def _stream(self) -> None:
        link = self.link
        src = self.node.name
        for path in self.pending:
            if link.backlog_us(src) >= self.max_backlog:
                return
            f = self.staging.files[path]
            while self.cursor[path] < f.size and link.backlog_us(src) < self.max_backlog:
                off = self.cursor[path]
                n = min(self.chunk_size, f.size - off)
                wire = pack_chunk(path, f.size, f.digest, off, f.data[off : off + n])
                outcome = self.node.transmit(self.link_name, "FILESYNC", wire)
                if outcome.outcome is Outcome.REJECTED_DOWN:
                    self.stats.chunks_rejected += 1
                    return
                self.cursor[path] = off + n
                self.last_sent_at[path] = self.node.now
                self.stats.chunks_sent += 1
                self.stats.bytes_sent += n
                self._cycle_chunks += 1
                self._cycle_bytes += n

    def on_packet(self, data: bytes, link: LinkModel) -> None:
        try:
            packet = ccsds.decode_packet(data)
            manifest_time, entries = unpack_ack(packet.payload)
        except (ccsds.CcsdsError, SyncWireError) as exc:
            self.node.trace("SYNC_REJECT", "0x1A2", str(exc))
            return
        self.stats.acks_received += 1
        for e in entries:
            f = self.staging.files.get(e.path)
            if f is None or e.path in self.confirmed:
                continue
            if e.complete and e.size == f.size and e.content_hash == f.digest:
                self.confirmed.add(e.path)
                self.pending.remove(e.path)
                del self.cursor[e.path]
                continue
            src_entry = SyncManifest([ManifestEntry(e.path, f.size, f.digest)])
            delta = compute_delta(src_entry, SyncManifest([e]), self.chunk_size)
            resume = delta[0].resume_offset if delta else 0
            gap_report = manifest_time == 0
            # Everything sent before the manifest went out has already reached the
            # receiver (links are FIFO), so an ack for it can safely rewind the cursor.
            settled = self.last_sent_at.get(e.path, -1) < manifest_time
            if (gap_report or settled) and resume < self.cursor[e.path]:
                self.cursor[e.path] = resume
                self.stats.rewinds += 1
        self._stream()


class SyncReceiver:
    """Deployer side: assembles chunks into the DeployerStore and answers manifests."""

    def __init__(self, store: DeployerStore, link_name: str = "wifi"):
        self.store = store
        self.link_name = link_name
        self.node: Optional[NodeRuntime] = None
        self.chunks_received = 0
        self.duplicates = 0
        self.gaps = 0
        self.corrupt = 0
        self._gap_reported: dict[str, int] = {}

    def start(self, node: NodeRuntime) -> None:
        self.node = node
        node.packet_routes[node.message_map["FILESYNC"].apid] = self.on_packet

    def on_packet(self, data: bytes, link: LinkModel) -> None:
        node = self.node
        try:
            packet = ccsds.decode_packet(data)
            sub = subtype_of(packet.payload)
            if sub == SUB_MANIFEST:
                t, entries = unpack_manifest(packet.payload)
                states = []
                for e in entries:
                    self.store.expect(e.path, e.size, e.content_hash)
                    states.append(self.store.state_of(e.path))
                node.transmit(self.link_name, "FILESYNC", pack_ack(states, t))
            elif sub == SUB_CHUNK:
                self._chunk(*unpack_chunk(packet.payload))
            else:
                raise SyncWireError(f"unexpected subtype {sub}")
        except (ccsds.CcsdsError, SyncWireError) as exc:
            node.trace("SYNC_REJECT", "0x1A2", str(exc))

    def _chunk(self, path: str, size: int, digest: bytes, offset: int, payload: bytes) -> None:
        node = self.node
        self.chunks_received += 1
        status = self.store.receive_chunk(path, size, digest, offset, payload, node.now)
        if status == "duplicate":
            self.duplicates += 1
        elif status == "gap":
            self.gaps += 1
            held = self.store.state_of(path).size
            if self._gap_reported.get(path) != held:
                self._gap_reported[path] = held
                node.transmit(self.link_name, "FILESYNC", pack_ack([self.store.state_of(path)], 0))
        elif status == "corrupt":
            self.corrupt += 1
            node.trace("SYNC_CORRUPT", "0x1A2", path)
        elif status == "complete":
            node.trace("SYNC_COMPLETE", "0x1A2", f"{path} {size}B")
