"""Deterministic discrete-event kernel: global clock, event queue, RNG streams, trace."""

from __future__ import annotations

import hashlib
import heapq
import random
from pathlib import Path
from typing import Any, Callable, Optional

US_PER_S = 1_000_000


def seconds(t_us: int) -> float:
    return t_us / US_PER_S


def us(t_s: float) -> int:
    return int(round(t_s * US_PER_S))


class PastTime(ValueError):
    pass


class Trace:
    """Line-delimited event records with a stable field order.

    One record per line, tab separated::

        sim_time_us  node  event_kind  msg_id/apid  detail
    """

    def __init__(self) -> None:
        self.lines: list[str] = []

    def record(self, t: int, node: str, kind: str, ident: str = "-", detail: str = "") -> None:
        self.lines.append(f"{t}\t{node}\t{kind}\t{ident}\t{detail}")

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)

    def write(self, path: Path | str) -> None:
        Path(path).write_text(self.text())

    def select(self, kind: Optional[str] = None, node: Optional[str] = None) -> list[list[str]]:
        out = []
        for line in self.lines:
            rec = line.split("\t")
            if kind is not None and rec[2] != kind:
                continue
            if node is not None and rec[1] != node:
                continue
            out.append(rec)
        return out


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2b(f"{seed}/{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


class SimKernel:
    """Owns simulated time. Events at equal time fire in insertion order."""

    def __init__(self, seed: int = 0, trace: Optional[Trace] = None):
        self.seed = seed
        self.now = 0
        self.trace = trace if trace is not None else Trace()
        self._queue: list[tuple[int, int, Callable, tuple]] = []
        self._counter = 0
        self._cancelled: set[int] = set()
        self._streams: dict[str, random.Random] = {}
        self._hooks: dict[str, list[Callable[[int], Any]]] = {}
        self.milestones: dict[str, int] = {}
        self._stopped = False
        self.events_fired = 0

    # -- scheduling ---------------------------------------------------------

    def schedule(self, at: int, fn: Callable, *args: Any) -> int:
        if at < self.now:
            raise PastTime(f"cannot schedule at {at} us, clock is at {self.now} us")
        eid = self._counter
        self._counter += 1
        heapq.heappush(self._queue, (at, eid, fn, args))
        return eid

    def call_in(self, delay: int, fn: Callable, *args: Any) -> int:
        return self.schedule(self.now + max(0, delay), fn, *args)

    def cancel(self, eid: int) -> None:
        self._cancelled.add(eid)

    def pending(self) -> int:
        return len(self._queue) - len(self._cancelled)

    def stop(self) -> None:
        self._stopped = True

    def run(self, until: Optional[int] = None) -> int:
        """Fire events in (time, insertion) order; returns the final clock value."""
        self._stopped = False
        queue = self._queue
        while queue and not self._stopped:
            at, eid, fn, args = queue[0]
            if until is not None and at > until:
                break
            heapq.heappop(queue)
            if eid in self._cancelled:
                self._cancelled.discard(eid)
                continue
            self.now = at
            self.events_fired += 1
            fn(*args)
        if until is not None and not self._stopped and self.now < until:
            self.now = until
        return self.now

    # -- randomness ---------------------------------------------------------

    def rng(self, label: str) -> random.Random:
        """Independent stream per consumer label, all derived from the one scenario seed."""
        stream = self._streams.get(label)
        if stream is None:
            stream = random.Random(derive_seed(self.seed, label))
            self._streams[label] = stream
        return stream

    def seed_for(self, label: str) -> int:
        return derive_seed(self.seed, label)

    # -- named mission events -------------------------------------------------

    def on(self, name: str, fn: Callable[[int], Any]) -> None:
        if name in self.milestones:
            fn(self.milestones[name])
        else:
            self._hooks.setdefault(name, []).append(fn)

    def emit(self, name: str) -> None:
        """Mark a named mission event as having happened now (first occurrence wins)."""
        if name in self.milestones:
            return
        self.milestones[name] = self.now
        for fn in self._hooks.pop(name, []):
            fn(self.now)
