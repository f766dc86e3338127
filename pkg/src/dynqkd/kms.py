"""Key management: per-pair key buffers, QKD session agents and tunnel consumers.

Everything here is mutated only from the simulation event loop, so the
classes are plain mutable objects without locking.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DeviceMismatch, InsufficientKeys, NotGenerating
from .qkd import REPORT_INTERVAL_S, QkdLinkEstimate, sample_observation
from .topology import Route, Topology

AES256_KEY_BITS = 256
DEFAULT_REKEY_INTERVAL_S = 60.0
WARMUP_RANGE_S = (600.0, 900.0)
STATS_WINDOW_S = 600.0

PairId = tuple[str, str]


@dataclass
class KeyBlock:
    key_id: str
    bits: int
    created_at: float
    material: bytes
    used_bits: int = 0

    @property
    def remaining(self) -> int:
        return self.bits - self.used_bits


@dataclass(frozen=True)
class KeyMaterial:
    """Handle on reserved key bits: (key_id, first bit, n bits) pieces in FIFO order."""

    pair_id: PairId
    bits: int
    pieces: tuple[tuple[str, int, int], ...]
    reserved_at: float


@dataclass(frozen=True)
class AuditRecord:
    timestamp_s: float
    pair_id: PairId
    event: str  # push | reserve | starve
    bits: int
    buffer_bits: int


@dataclass(frozen=True)
class StoreStats:
    generation_rate_bps: float = 0.0
    consumption_rate_bps: float = 0.0
    buffer_bits: int = 0
    starvation_events: int = 0


class KeyStore:
    """FIFO buffer of key blocks for one Alice/Bob pair."""

    def __init__(self, pair_id: PairId, seed: int = 0, created_at: float = 0.0):
        self.pair_id = tuple(pair_id)
        self.created_at = created_at
        self.blocks: deque[KeyBlock] = deque()
        self.generated_bits = 0
        self.consumed_bits = 0
        self.generated_count = 0
        self.consumed_count = 0
        self.starvation_events = 0
        self.audit: list[AuditRecord] = []
        self._rng = np.random.default_rng(seed)

    @property
    def total_bits(self) -> int:
        return sum(b.remaining for b in self.blocks)

    @property
    def buffer_bits(self) -> int:
        return self.generated_bits - self.consumed_bits

    def _record(self, now: float, event: str, bits: int):
        self.audit.append(AuditRecord(now, self.pair_id, event, bits, self.buffer_bits))

    def push_key_block(self, bits: int, now: float) -> KeyBlock:
        if bits <= 0:
            raise ValueError(f"key block must carry > 0 bits, got {bits}")
        bits = int(bits)
        self.generated_count += 1
        block = KeyBlock(
            key_id=f"{self.pair_id[0]}:{self.pair_id[1]}:{self.generated_count:08d}",
            bits=bits,
            created_at=now,
            material=self._rng.bytes(math.ceil(bits / 8)),
        )
        self.blocks.append(block)
        self.generated_bits += bits
        self._record(now, "push", bits)
        return block

    def reserve_key(self, bits: int, now: float) -> KeyMaterial:
        if bits <= 0:
            raise ValueError(f"reservation must be > 0 bits, got {bits}")
        if self.buffer_bits < bits:
            raise InsufficientKeys(f"{self.pair_id}: {self.buffer_bits} bits buffered, {bits} requested")
        need = bits
        pieces = []
        while need:
            head = self.blocks[0]
            take = min(need, head.remaining)
            pieces.append((head.key_id, head.used_bits, take))
            head.used_bits += take
            need -= take
            if head.remaining == 0:
                self.blocks.popleft()
                self.consumed_count += 1
        self.consumed_bits += bits
        self._record(now, "reserve", bits)
        return KeyMaterial(self.pair_id, bits, tuple(pieces), now)

    def record_starvation(self, now: float, bits: int):
        self.starvation_events += 1
        self._record(now, "starve", bits)

    def stats(self, now: float, window_s: float = STATS_WINDOW_S) -> StoreStats:
        span = min(window_s, now - self.created_at)
        if span <= 0:
            return StoreStats(buffer_bits=self.buffer_bits, starvation_events=self.starvation_events)
        start = now - span
        gen = sum(r.bits for r in self.audit if r.event == "push" and start < r.timestamp_s <= now)
        used = sum(r.bits for r in self.audit if r.event == "reserve" and start < r.timestamp_s <= now)
        return StoreStats(gen / span, used / span, self.buffer_bits, self.starvation_events)

    def audit_csv(self) -> str:
        return audit_csv([self])


def store_stats(stores, now: float, window_s: float = STATS_WINDOW_S) -> StoreStats:
    """Stats for one store, or summed over an iterable of stores."""
    if isinstance(stores, KeyStore):
        return stores.stats(now, window_s)
    parts = [s.stats(now, window_s) for s in stores]
    return StoreStats(
        sum(p.generation_rate_bps for p in parts),
        sum(p.consumption_rate_bps for p in parts),
        sum(p.buffer_bits for p in parts),
        sum(p.starvation_events for p in parts),
    )


AUDIT_COLUMNS = ("timestamp_s", "pair_id", "event", "bits", "buffer_bits")


def audit_csv(stores) -> str:
    records = sorted((r for s in stores for r in s.audit),
                     key=lambda r: (r.timestamp_s, r.pair_id))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AUDIT_COLUMNS)
    for r in records:
        w.writerow([f"{r.timestamp_s:.3f}", f"{r.pair_id[0]}-{r.pair_id[1]}", r.event, r.bits, r.buffer_bits])
    return buf.getvalue()


# --------------------------------------------------------------------------
# sessions

class SessionState(str, Enum):
    ESTABLISHING = "Establishing"
    GENERATING = "Generating"
    STOPPED = "Stopped"
    ABORTED = "Aborted"


_SESSION_MOVES = {
    SessionState.ESTABLISHING: {SessionState.GENERATING, SessionState.STOPPED, SessionState.ABORTED},
    SessionState.GENERATING: {SessionState.STOPPED, SessionState.ABORTED},
    SessionState.STOPPED: set(),
    SessionState.ABORTED: set(),
}


@dataclass
class QkdSession:
    pair_id: PairId
    route: Route
    started_at: float
    warmup_s: float
    report_interval_s: float = REPORT_INTERVAL_S
    state: SessionState = SessionState.ESTABLISHING
    history: list[tuple[float, SessionState]] = field(default_factory=list)

    @property
    def generating_at(self) -> float:
        return self.started_at + self.warmup_s

    @property
    def first_report_at(self) -> float:
        return self.generating_at + self.report_interval_s

    @property
    def active(self) -> bool:
        return self.state in (SessionState.ESTABLISHING, SessionState.GENERATING)

    def _move(self, new: SessionState, now: float):
        if new not in _SESSION_MOVES[self.state]:
            raise ValueError(f"illegal session transition {self.state.value} -> {new.value}")
        self.state = new
        self.history.append((now, new))

    def advance(self, now: float) -> SessionState:
        if self.state is SessionState.ESTABLISHING and now >= self.generating_at:
            self._move(SessionState.GENERATING, self.generating_at)
        return self.state

    def stop(self, now: float):
        if self.active:
            self._move(SessionState.STOPPED, now)

    def abort(self, now: float):
        if self.active:
            self._move(SessionState.ABORTED, now)


def draw_warmup(seed: int) -> float:
    lo, hi = WARMUP_RANGE_S
    return float(np.random.default_rng(seed).uniform(lo, hi))


def session_start(pair_id: PairId, route: Route, seed: int, now: float,
                  topology: Topology, busy_devices=()) -> QkdSession:
    """Start key generation between an Alice and a Bob at the route ends."""
    alice_id, bob_id = pair_id
    a_node, a_dev = topology.find_device(alice_id)
    b_node, b_dev = topology.find_device(bob_id)
    if a_dev.kind != "alice" or b_dev.kind != "bob":
        raise DeviceMismatch(f"pair {pair_id} needs one Alice and one Bob, got {a_dev.kind}/{b_dev.kind}")
    if (a_node.id, b_node.id) != route.endpoints:
        raise DeviceMismatch(f"pair {pair_id} sits on {a_node.id}/{b_node.id}, route ends {route.endpoints}")
    for dev in pair_id:
        if dev in busy_devices:
            raise DeviceMismatch(f"device {dev} is already in a session")
    session = QkdSession(tuple(pair_id), route, now, draw_warmup(seed))
    session.history.append((now, SessionState.ESTABLISHING))
    return session


@dataclass(frozen=True)
class KeyRateReport:
    timestamp_s: float
    qber_pct: float
    skr_bps: float
    bits: int


def session_report(session: QkdSession, estimate: QkdLinkEstimate, rng: np.random.Generator,
                   store: KeyStore | None, now: float, sigma: float = 0.05,
                   push: bool = True) -> KeyRateReport:
    """Sample one device report and credit ``skr * interval`` bits to the store.

    With ``push`` false the bits are only computed, for callers that post the
    accounting as a separate event.
    """
    if session.advance(now) is not SessionState.GENERATING:
        raise NotGenerating(f"session {session.pair_id} is {session.state.value}")
    qber, skr = sample_observation(estimate, rng, sigma)
    bits = int(round(skr * session.report_interval_s))
    if push and bits > 0 and store is not None:
        store.push_key_block(bits, now)
    return KeyRateReport(now, qber, skr, bits)


# --------------------------------------------------------------------------
# encrypted tunnel consumer

class TunnelState(str, Enum):
    OPEN = "Open"
    STARVED = "Starved"
    CLOSED = "Closed"


@dataclass
class Tunnel:
    endpoints: tuple[str, str]
    rekey_interval_s: float = DEFAULT_REKEY_INTERVAL_S
    key_bits_per_rekey: int = AES256_KEY_BITS
    state: TunnelState = TunnelState.OPEN
    next_rekey_at: float = 0.0
    rekeys: int = 0
    starvations: int = 0
    keys: list[KeyMaterial] = field(default_factory=list)

    def close(self):
        self.state = TunnelState.CLOSED


def open_tunnel(endpoints, now: float, rekey_interval_s: float = DEFAULT_REKEY_INTERVAL_S) -> Tunnel:
    """First rekey is due immediately."""
    return Tunnel(tuple(endpoints), rekey_interval_s, next_rekey_at=now)


def tunnel_tick(tunnel: Tunnel, store: KeyStore, now: float) -> TunnelState:
    """Run every rekey boundary up to ``now``."""
    if tunnel.state is TunnelState.CLOSED:
        return tunnel.state
    while tunnel.next_rekey_at <= now:
        at = tunnel.next_rekey_at
        try:
            tunnel.keys.append(store.reserve_key(tunnel.key_bits_per_rekey, at))
            tunnel.rekeys += 1
            tunnel.state = TunnelState.OPEN
        except InsufficientKeys:
            tunnel.starvations += 1
            store.record_starvation(at, tunnel.key_bits_per_rekey)
            tunnel.state = TunnelState.STARVED
        tunnel.next_rekey_at = at + tunnel.rekey_interval_s
    return tunnel.state
