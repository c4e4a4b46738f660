"""Point-to-point link model: serialization, latency, seeded loss, up/down state."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol

from .kernel import SimKernel


class Endpoint(Protocol):
    name: str

    def receive(self, data: bytes, link: "LinkModel") -> None: ...


class Outcome(Enum):
    DELIVERED = "delivered"
    LOST = "lost"
    REJECTED_DOWN = "rejected_down"


@dataclass(frozen=True)
class Delivery:
    outcome: Outcome
    at: Optional[int] = None

    @property
    def delivered(self) -> bool:
        return self.outcome is Outcome.DELIVERED


@dataclass
class LinkStats:
    submitted: int = 0
    delivered: int = 0
    lost: int = 0
    rejected: int = 0
    bytes_delivered: int = 0

    def as_dict(self) -> dict:
        return {
            "submitted": self.submitted,
            "delivered": self.delivered,
            "lost": self.lost,
            "rejected": self.rejected,
            "bytes_delivered": self.bytes_delivered,
        }


@dataclass
class LinkModel:
    """A full-duplex link; each direction has its own FIFO transmitter.

    A packet occupies its direction's transmitter for bits/bandwidth, then
    arrives ``latency`` later, so arrivals in one direction never reorder.
    """

    name: str
    bandwidth_bps: int
    latency_us: int
    loss_probability: float = 0.0
    up: bool = True
    stats: LinkStats = field(default_factory=LinkStats)

    def __post_init__(self) -> None:
        if self.bandwidth_bps <= 0:
            raise ValueError("link bandwidth must be positive")
        if self.latency_us < 0:
            raise ValueError("link latency must be non-negative")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss probability must lie in [0, 1]")
        self._kernel: Optional[SimKernel] = None
        self._ends: dict[str, Endpoint] = {}
        self._tx_free: dict[str, int] = {}
        self._last_arrival: dict[str, int] = {}

    def attach(self, kernel: SimKernel, a: Endpoint, b: Endpoint) -> None:
        self._kernel = kernel
        self._ends = {a.name: b, b.name: a}
        self._tx_free = {a.name: 0, b.name: 0}
        self._rng = kernel.rng(f"link.{self.name}")

    def peer_of(self, node: str) -> Endpoint:
        return self._ends[node]

    def serialization_us(self, nbytes: int) -> int:
        bits = nbytes * 8
        return -(-bits * 1_000_000 // self.bandwidth_bps)

    def backlog_us(self, src: str) -> int:
        """Time until the transmitter in direction ``src`` falls idle."""
        return max(0, self._tx_free[src] - self._kernel.now)

    def set_loss(self, p: float) -> None:
        if not 0.0 <= p <= 1.0:
            raise ValueError("loss probability must lie in [0, 1]")
        self.loss_probability = p

    def submit(self, data: bytes, src: str) -> Delivery:
        kernel = self._kernel
        if kernel is None:
            raise RuntimeError(f"link {self.name} is not attached")
        dst = self._ends[src]
        now = kernel.now
        self.stats.submitted += 1
        ident = f"0x{((data[0] & 0x7) << 8) | data[1]:03X}" if len(data) >= 2 else "-"
        if not self.up:
            self.stats.rejected += 1
            kernel.trace.record(now, src, "LINK_REJECT", ident, f"{self.name} {len(data)}B")
            return Delivery(Outcome.REJECTED_DOWN)
        start = max(now, self._tx_free[src])
        self._tx_free[src] = start + self.serialization_us(len(data))
        if self._rng.random() < self.loss_probability:
            self.stats.lost += 1
            kernel.trace.record(now, src, "LINK_LOST", ident, f"{self.name} {len(data)}B")
            return Delivery(Outcome.LOST)
        arrival = self._tx_free[src] + self.latency_us
        self.stats.delivered += 1
        self.stats.bytes_delivered += len(data)
        self._last_arrival[src] = arrival
        kernel.trace.record(
            now, src, "LINK_TX", ident, f"{self.name}->{dst.name} {len(data)}B at={arrival}"
        )
        kernel.schedule(arrival, dst.receive, data, self)
        return Delivery(Outcome.DELIVERED, arrival)
