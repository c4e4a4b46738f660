"""cFS-style framework layer: executive, software bus, TDM scheduler, TO and CI apps.

One ``NodeRuntime`` runs per simulated on-board computer. All of its mutation
happens inside kernel callbacks, so a node is single-threaded by construction.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Optional

from . import ccsds
from .ccsds import CcsdsPacket, SequenceCounters
from .kernel import SimKernel
from .links import Delivery, LinkModel
from .messages import (
    WIRE_CODECS,
    CmdAck,
    FlagKind,
    MessageId,
    MessageKind,
    MessageMap,
    PayloadError,
    UnknownMessageId,
)

log = logging.getLogger(__name__)

DEFAULT_BASE_TICK_US = 5_000
DEFAULT_PIPE_DEPTH = 16


class DuplicateApp(ValueError):
    pass


class RoutingError(AssertionError):
    pass


@dataclass(frozen=True)
class BusMessage:
    name: str
    msg_id: MessageId
    sim_time: int
    payload: Any = None


@dataclass(frozen=True)
class DeliveryReport:
    delivered: int
    dropped: int


@dataclass(frozen=True)
class HandlerFault:
    app: str
    cause: str
    at: int


class Pipe:
    """Bounded FIFO owned by one app. Overflow drops, never blocks the publisher."""

    def __init__(self, owner: str, depth: int):
        if depth <= 0:
            raise ValueError("pipe depth must be positive")
        self.owner = owner
        self.depth = depth
        self.queue: deque[BusMessage] = deque()
        self.drops = 0

    def offer(self, msg: BusMessage) -> bool:
        if len(self.queue) >= self.depth:
            self.drops += 1
            return False
        self.queue.append(msg)
        return True

    def __len__(self) -> int:
        return len(self.queue)


@dataclass(frozen=True)
class ScheduleEntry:
    msg: str
    period: int
    offset: int = 0


class ScheduleTable:
    """Static TDM table: each entry emits its wakeup at ``offset + k * period``."""

    def __init__(self, entries: Iterable[ScheduleEntry], base_tick: int = DEFAULT_BASE_TICK_US):
        if base_tick <= 0:
            raise ValueError("base tick must be positive")
        self.base_tick = base_tick
        self.entries = list(entries)
        for e in self.entries:
            if e.period <= 0 or e.period % base_tick:
                raise ValueError(f"{e.msg}: period {e.period} us is not a positive multiple of {base_tick}")
            if not 0 <= e.offset < e.period or e.offset % base_tick:
                raise ValueError(f"{e.msg}: offset {e.offset} us must be a tick multiple below the period")

    def due(self, now: int) -> list[ScheduleEntry]:
        return [e for e in self.entries if (now - e.offset) % e.period == 0 and now >= e.offset]

    def next_due_after(self, now: int) -> Optional[int]:
        best = None
        for e in self.entries:
            if now < e.offset:
                t = e.offset
            else:
                t = e.offset + ((now - e.offset) // e.period + 1) * e.period
            if best is None or t < best:
                best = t
        return best


class App:
    """Base for bus-driven apps: init once at boot, then one handler call per message."""

    name = "APP"
    subscriptions: tuple[str, ...] = ()
    pipe_depth = DEFAULT_PIPE_DEPTH

    def __init__(self) -> None:
        self.faulted = False
        self.node: Optional[NodeRuntime] = None

    def init(self, node: NodeRuntime) -> None:
        pass

    def handle(self, msg: BusMessage) -> None:
        raise NotImplementedError

    def log_event(self, kind: str, detail: str = "") -> None:
        node = self.node
        node.kernel.trace.record(node.now, node.name, kind, self.name, detail)


class FunctionApp(App):
    """Adapter so a plain callable can be registered as an app."""

    def __init__(self, name: str, subscriptions: Iterable[str], handler: Callable[[BusMessage], Any],
                 pipe_depth: int = DEFAULT_PIPE_DEPTH):
        super().__init__()
        self.name = name
        self.subscriptions = tuple(subscriptions)
        self.pipe_depth = pipe_depth
        self._handler = handler

    def handle(self, msg: BusMessage) -> None:
        self._handler(msg)


@dataclass
class MsgCounters:
    publishes: int = 0
    copies: int = 0
    delivered: int = 0
    dropped: int = 0


class NodeRuntime:
    def __init__(
        self,
        name: str,
        kernel: SimKernel,
        message_map: MessageMap,
        schedule: Optional[ScheduleTable] = None,
        base_tick_us: int = DEFAULT_BASE_TICK_US,
    ):
        self.name = name
        self.kernel = kernel
        self.message_map = message_map
        self.schedule = schedule if schedule is not None else ScheduleTable([], base_tick_us)
        self.apps: list[App] = []
        self.pipes: dict[str, Pipe] = {}
        self._sub_apids: dict[str, frozenset[int]] = {}
        self.routes: dict[int, list[App]] = {}
        self.links: dict[str, LinkModel] = {}
        self.downlink: Optional[str] = None
        self.packet_routes: dict[int, Callable[[bytes, LinkModel], None]] = {}
        self.services: list[Any] = []
        self.monitors: list[Callable[[BusMessage], None]] = []
        self.counters: dict[str, MsgCounters] = {}
        self.faults: list[HandlerFault] = []
        self.seq = SequenceCounters()
        self.powered = False
        self.crashed = False
        self.boot_time: Optional[int] = None
        self.ci: Optional[CiApp] = None
        self.to: Optional[ToApp] = None

    @property
    def now(self) -> int:
        return self.kernel.now

    @property
    def alive(self) -> bool:
        return self.powered and not self.crashed

    def trace(self, kind: str, ident: str = "-", detail: str = "") -> None:
        self.kernel.trace.record(self.kernel.now, self.name, kind, ident, detail)

    # -- executive ------------------------------------------------------------

    def register_app(self, app: App, depth: Optional[int] = None) -> App:
        if app.name in self.pipes:
            raise DuplicateApp(f"app {app.name!r} already registered on {self.name}")
        for sub in app.subscriptions:
            self.message_map[sub]  # raises on unknown ids
        pipe = Pipe(app.name, depth or app.pipe_depth)
        self.pipes[app.name] = pipe
        self._sub_apids[app.name] = frozenset(self.message_map[s].apid for s in app.subscriptions)
        self.apps.append(app)
        for sub in app.subscriptions:
            self.routes.setdefault(self.message_map[sub].apid, []).append(app)
        app.node = self
        if isinstance(app, CiApp):
            self.ci = app
        if isinstance(app, ToApp):
            self.to = app
        if self.powered:
            app.init(self)
        return app

    def attach_link(self, link: LinkModel, downlink: bool = False) -> None:
        self.links[link.name] = link
        if downlink:
            self.downlink = link.name

    def add_service(self, service: Any) -> None:
        self.services.append(service)

    def power_on(self, boot_delay: int = 0) -> None:
        if self.powered or self.crashed:
            return
        self.trace("POWER_ON", detail=f"boot_delay={boot_delay}")
        self.kernel.call_in(boot_delay, self._boot)

    def _boot(self) -> None:
        if self.crashed:
            return
        self.powered = True
        self.boot_time = self.kernel.now
        self.trace("BOOT")
        for app in self.apps:
            app.init(self)
        for svc in self.services:
            svc.start(self)
        first = self.schedule.next_due_after(-1)
        if first is not None:
            self.kernel.schedule(self.boot_time + first, self._tick, first)
        self.dispatch_until_idle()

    def crash(self) -> None:
        if self.crashed:
            return
        self.crashed = True
        self.trace("NODE_CRASH")

    # -- software bus ---------------------------------------------------------

    def publish(self, msg: BusMessage) -> DeliveryReport:
        d = self.message_map.by_apid(msg.msg_id.apid)
        if d is None or d.msg_id != msg.msg_id:
            raise UnknownMessageId(str(msg.msg_id))
        c = self.counters.setdefault(d.name, MsgCounters())
        c.publishes += 1
        delivered = dropped = 0
        for app in self.routes.get(msg.msg_id.apid, ()):
            c.copies += 1
            if not app.faulted and self.pipes[app.name].offer(msg):
                delivered += 1
            else:
                dropped += 1
                if app.faulted:
                    self.pipes[app.name].drops += 1
                self.trace("DROP", str(msg.msg_id), f"{d.name} {app.name}")
        c.delivered += delivered
        c.dropped += dropped
        self.trace("PUBLISH", str(msg.msg_id), f"{d.name} delivered={delivered} dropped={dropped}")
        for mon in self.monitors:
            mon(msg)
        return DeliveryReport(delivered, dropped)

    def send(self, name: str, payload: Any = None) -> DeliveryReport:
        d = self.message_map[name]
        return self.publish(BusMessage(name, d.msg_id, self.kernel.now, payload))

    def dispatch_until_idle(self) -> int:
        """Round-robin over apps in registration order, FIFO within each pipe."""
        if not self.alive:
            return 0
        processed = 0
        busy = True
        while busy and self.alive:
            busy = False
            for app in self.apps:
                pipe = self.pipes[app.name]
                if not pipe.queue:
                    continue
                busy = True
                msg = pipe.queue.popleft()
                if msg.msg_id.apid not in self._sub_apids[app.name]:
                    raise RoutingError(f"{app.name} received unsubscribed {msg.name}")
                self.trace("DELIVER", str(msg.msg_id), f"{msg.name} {app.name}")
                processed += 1
                try:
                    app.handle(msg)
                except Exception as exc:  # app fault isolation
                    self._fault(app, exc)
                if not self.alive:
                    break
        return processed

    def _fault(self, app: App, exc: Exception) -> None:
        app.faulted = True
        cause = f"{type(exc).__name__}: {exc}"
        self.faults.append(HandlerFault(app.name, cause, self.kernel.now))
        pipe = self.pipes[app.name]
        discarded = len(pipe.queue)
        pipe.queue.clear()
        self.trace("APP_FAULT", app.name, f"{cause} discarded={discarded}")
        log.warning("%s: app %s faulted: %s", self.name, app.name, cause)

    # -- scheduler --------------------------------------------------------------

    def scheduler_tick(self, now: int) -> list[BusMessage]:
        """Emit the wakeups due at node-local time ``now``, in table order."""
        out = []
        for e in self.schedule.due(now):
            d = self.message_map[e.msg]
            msg = BusMessage(e.msg, d.msg_id, self.kernel.now, None)
            self.publish(msg)
            out.append(msg)
        return out

    def _tick(self, local: int) -> None:
        if not self.alive:
            return
        self.scheduler_tick(local)
        self.dispatch_until_idle()
        # Ticks with no due entry emit nothing, so the loop jumps straight to the next due one.
        nxt = self.schedule.next_due_after(local)
        if nxt is not None and self.alive:
            self.kernel.schedule(self.boot_time + nxt, self._tick, nxt)

    # -- timers and network stack ------------------------------------------------

    def call_later(self, delay: int, fn: Callable, *args: Any) -> int:
        return self.kernel.call_in(delay, self._run_guarded, fn, args)

    def _run_guarded(self, fn: Callable, args: tuple) -> None:
        if not self.alive:
            return
        fn(*args)
        self.dispatch_until_idle()

    def receive(self, data: bytes, link: LinkModel) -> None:
        if not self.alive:
            self.trace("RX_DEAD", "-", f"{link.name} {len(data)}B")
            return
        apid = ((data[0] & 0x7) << 8) | data[1] if len(data) >= 2 else -1
        handler = self.packet_routes.get(apid)
        if handler is not None:
            handler(data, link)
        elif self.ci is not None and not self.ci.faulted:
            self.ci.ingest(data, link)
        else:
            self.trace("RX_UNHANDLED", f"0x{apid:03X}", link.name)
        self.dispatch_until_idle()

    def transmit(self, link_name: str, msg_name: str, payload: bytes) -> Delivery:
        d = self.message_map[msg_name]
        if not d.wire:
            raise ValueError(f"{msg_name} is node-local and cannot be serialized")
        packet = CcsdsPacket.make(d.apid, payload, self.seq.take(d.apid), d.packet_type)
        return self.links[link_name].submit(ccsds.encode_packet(packet), self.name)


class ToApp(App):
    """Telemetry Output: forwards downlink-marked bus telemetry as CCSDS packets."""

    name = "TO"
    pipe_depth = 32

    def __init__(self, node_name: str, message_map: MessageMap):
        super().__init__()
        self.subscriptions = tuple(d.name for d in message_map.downlinked_by(node_name))
        self.sent = 0
        self.link_errors = 0

    def handle(self, msg: BusMessage) -> None:
        node = self.node
        if node.downlink is None:
            self.link_errors += 1
            return
        payload = msg.payload.pack()
        outcome = node.transmit(node.downlink, msg.name, payload)
        self.sent += 1
        if not outcome.delivered:
            self.link_errors += 1


class CiApp(App):
    """Command Ingest: decodes packets arriving on any link and republishes them on the bus."""

    name = "CI"

    def __init__(self) -> None:
        super().__init__()
        self.ingested = 0
        self.rejected = 0
        self.acks_sent = 0

    def handle(self, msg: BusMessage) -> None:  # CI subscribes to nothing
        pass

    def ingest(self, data: bytes, link: LinkModel) -> Optional[BusMessage]:
        node = self.node
        try:
            packet = ccsds.decode_packet(data)
            d = node.message_map.by_apid(packet.apid)
            if d is None or not d.wire:
                raise PayloadError(f"apid 0x{packet.apid:03X} is not a wire message")
            codec = WIRE_CODECS.get(d.name)
            if codec is None:
                raise PayloadError(f"no codec for {d.name}")
            payload = codec.unpack(packet.payload)
        except (ccsds.CcsdsError, PayloadError, UnknownMessageId) as exc:
            self.rejected += 1
            node.trace("CI_REJECT", "-", f"{link.name} {exc}")
            return None
        if d.name == "WIFI_PROBE":
            # Echo at the network layer; the probe never reaches the bus.
            node.transmit(link.name, "WIFI_PROBE_REPLY", packet.payload)
            return None
        self.ingested += 1
        if d.msg_id.kind is MessageKind.COMMAND:
            kind = int(payload.kind) if isinstance(payload.kind, FlagKind) else 0
            node.transmit(link.name, "CMD_ACK", CmdAck(packet.apid, packet.header.seq_count, kind).pack())
            self.acks_sent += 1
        msg = BusMessage(d.name, d.msg_id, node.now, payload)
        node.publish(msg)
        return msg
