"""QKD-aware SDN controller: route lookup, cross-connects, sessions and rerouting.

A connection walks RouteSelected -> PathInstalled -> QkdStarting ->
Monitoring -> EncryptionActive. A QBER report at or above the threshold sends
it through Rerouting to the next route in its list, or to Failed once the
list is used up.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .channel import RECEIVER_SENSITIVITY_DBM, ChannelPlan, classical_feasibility
from .errors import DeviceBusy, NoRoute, PortConflict, StaleReport
from .kms import (DEFAULT_REKEY_INTERVAL_S, KeyRateReport, KeyStore, QkdSession, Tunnel,
                  open_tunnel, session_start)
from .qkd import QBER_ABORT_THRESHOLD_PCT
from .topology import FibreSpan, Route, Topology, enumerate_routes, route_loss

log = logging.getLogger(__name__)


class ConnState(str, Enum):
    ROUTE_SELECTED = "RouteSelected"
    PATH_INSTALLED = "PathInstalled"
    QKD_STARTING = "QkdStarting"
    MONITORING = "Monitoring"
    ENCRYPTION_ACTIVE = "EncryptionActive"
    REROUTING = "Rerouting"
    FAILED = "Failed"
    TORN_DOWN = "TornDown"


LEGAL_TRANSITIONS: Mapping[ConnState | None, frozenset[ConnState]] = MappingProxyType({
    None: frozenset({ConnState.ROUTE_SELECTED, ConnState.FAILED}),
    ConnState.ROUTE_SELECTED: frozenset({ConnState.PATH_INSTALLED, ConnState.FAILED, ConnState.TORN_DOWN}),
    ConnState.PATH_INSTALLED: frozenset({ConnState.QKD_STARTING, ConnState.TORN_DOWN}),
    ConnState.QKD_STARTING: frozenset({ConnState.MONITORING, ConnState.TORN_DOWN}),
    ConnState.MONITORING: frozenset({ConnState.ENCRYPTION_ACTIVE, ConnState.REROUTING, ConnState.TORN_DOWN}),
    ConnState.ENCRYPTION_ACTIVE: frozenset({ConnState.REROUTING, ConnState.TORN_DOWN}),
    ConnState.REROUTING: frozenset({ConnState.ROUTE_SELECTED, ConnState.FAILED}),
    ConnState.FAILED: frozenset({ConnState.TORN_DOWN}),
    ConnState.TORN_DOWN: frozenset(),
})


class Action(str, Enum):
    ACCEPT = "Accept"
    CONTINUE = "Continue"
    REROUTE = "Reroute"
    FAIL = "Fail"


QUANTUM_KINDS = ("quantum_secured", "coexistence")
REQUEST_KINDS = QUANTUM_KINDS + ("classical_only",)


@dataclass(frozen=True)
class ConnectionRequest:
    src: str
    dst: str
    kind: str = "quantum_secured"
    plan: ChannelPlan | None = None

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError("request endpoints must differ")
        if self.kind not in REQUEST_KINDS:
            raise ValueError(f"unknown request kind {self.kind!r}")

    @property
    def quantum(self) -> bool:
        return self.kind in QUANTUM_KINDS


@dataclass(frozen=True)
class CrossConnect:
    node: str
    in_port: str
    out_port: str

    def __str__(self) -> str:
        return f"{self.node}:{self.in_port}->{self.out_port}"


@dataclass(frozen=True)
class RouteEntry:
    route: Route
    loss_db: float


@dataclass(frozen=True)
class RouteTable:
    entries: Mapping[tuple[str, str], tuple[RouteEntry, ...]]

    @classmethod
    def build(cls, topology: Topology, max_hops: int = 3) -> "RouteTable":
        table = {}
        for src in topology.node_ids:
            for dst in topology.node_ids:
                if src == dst:
                    continue
                try:
                    routes = enumerate_routes(topology, src, dst, max_hops)
                except NoRoute:
                    routes = []
                table[(src, dst)] = tuple(RouteEntry(r, route_loss(topology, r)) for r in routes)
        return cls(MappingProxyType(table))

    def routes(self, src: str, dst: str) -> tuple[Route, ...]:
        return tuple(e.route for e in self.entries.get((src, dst), ()))

    def __eq__(self, other) -> bool:
        return isinstance(other, RouteTable) and dict(self.entries) == dict(other.entries)

    def dump(self) -> str:
        lines = []
        for (src, dst), entries in sorted(self.entries.items()):
            lines.append(f"{src} -> {dst}")
            if not entries:
                lines.append("  (no route)")
            for i, e in enumerate(entries, 1):
                lines.append(f"  {i}. {e.route} [{e.route.label}] {e.loss_db:.2f} dB "
                             f"({e.route.n_cross_connects} XC)")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class LinkEvent:
    """Topology change: ``down`` removes a span, ``up`` adds one, ``noop`` does nothing."""

    kind: str
    span_name: str = ""
    span: FibreSpan | None = None


@dataclass
class ConnectionState:
    conn_id: str
    request: ConnectionRequest
    routes: tuple[Route, ...]
    cursor: int = 0
    state: ConnState | None = None
    history: list[tuple[float, ConnState]] = field(default_factory=list)
    last_report: KeyRateReport | None = None
    session: QkdSession | None = None
    tunnel: Tunnel | None = None
    commands: tuple[CrossConnect, ...] = ()
    attempts: int = 0

    @property
    def route(self) -> Route | None:
        if self.cursor < len(self.routes):
            return self.routes[self.cursor]
        return None

    @property
    def pair_id(self) -> tuple[str, str] | None:
        if self.session is None:
            return None
        return self.session.pair_id

    @property
    def closed(self) -> bool:
        return self.state in (ConnState.FAILED, ConnState.TORN_DOWN)


LOG_COLUMNS = ("timestamp_s", "conn_id", "event", "route", "qber_pct", "skr_bps", "action")


@dataclass(frozen=True)
class LogRow:
    timestamp_s: float
    conn_id: str
    event: str
    route: str = ""
    qber_pct: float | None = None
    skr_bps: float | None = None
    action: str = ""

    def cells(self) -> list[str]:
        return [
            f"{self.timestamp_s:.3f}", self.conn_id, self.event, self.route,
            "" if self.qber_pct is None else f"{self.qber_pct:.4f}",
            "" if self.skr_bps is None else f"{self.skr_bps:.2f}",
            self.action,
        ]


class Controller:
    def __init__(self, topology: Topology, seed: int = 0, max_hops: int = 3,
                 threshold_pct: float = QBER_ABORT_THRESHOLD_PCT,
                 rekey_interval_s: float = DEFAULT_REKEY_INTERVAL_S,
                 sensitivity_dbm: float = RECEIVER_SENSITIVITY_DBM):
        self.topology = topology
        # every span ever seen, so live connections on a removed span can still be costed
        self.physical = topology
        self.max_hops = max_hops
        self.seed = seed
        self.threshold_pct = threshold_pct
        self.rekey_interval_s = rekey_interval_s
        self.sensitivity_dbm = sensitivity_dbm
        self.route_table = RouteTable.build(topology, max_hops)
        self.ports: dict[str, str] = {}
        self.busy_devices: dict[str, str] = {}
        self.connections: dict[str, ConnectionState] = {}
        self.stores: dict[tuple[str, str], KeyStore] = {}
        self.log: list[LogRow] = []
        self._conn_counter = 0

    # ------------------------------------------------------------------ helpers

    def _emit(self, now: float, conn: ConnectionState | str, event: str, action: str = "",
              qber: float | None = None, skr: float | None = None, route: Route | None = None):
        if isinstance(conn, ConnectionState):
            conn_id = conn.conn_id
            route = route if route is not None else conn.route
        else:
            conn_id = conn
        self.log.append(LogRow(now, conn_id, event, "" if route is None else str(route), qber, skr, action))

    def _move(self, conn: ConnectionState, new: ConnState, now: float):
        if new not in LEGAL_TRANSITIONS[conn.state]:
            raise RuntimeError(f"{conn.conn_id}: illegal transition {conn.state} -> {new}")
        conn.state = new
        conn.history.append((now, new))
        self._emit(now, conn, f"state:{new.value}")

    def store_for(self, pair_id: tuple[str, str]) -> KeyStore:
        store = self.stores.get(pair_id)
        if store is None:
            seed = int(np.random.SeedSequence([self.seed, len(self.stores), 7]).generate_state(1)[0])
            store = self.stores[pair_id] = KeyStore(pair_id, seed=seed)
        return store

    def _pair_for(self, route: Route) -> tuple[str, str]:
        src, dst = route.endpoints
        alice = self.topology.node(src).alice
        bob = self.topology.node(dst).bob
        if alice is None or bob is None:
            raise DeviceBusy(f"no Alice at {src} or no Bob at {dst}")
        return alice.id, bob.id

    def _session_seed(self, conn: ConnectionState) -> int:
        idx = int(conn.conn_id.lstrip("C"))
        return int(np.random.SeedSequence([self.seed, idx, conn.attempts]).generate_state(1)[0])

    def _endpoint_ports(self, route: Route, kind: str) -> tuple[str, str]:
        src, dst = route.endpoints
        if kind == "classical_only":
            tx = self.topology.node(src).device("transponder")
            rx = self.topology.node(dst).device("transponder")
            return (tx.id if tx else "tx"), (rx.id if rx else "rx")
        return self._pair_for(route)

    # --------------------------------------------------------------- operations

    def path_commands(self, route: Route, kind: str = "quantum_secured") -> list[CrossConnect]:
        """One cross-connect per OXC traversal, in route order."""
        first, last = self._endpoint_ports(route, kind)
        cmds = []
        for i, node in enumerate(route.nodes):
            in_port = first if i == 0 else route.spans[i - 1]
            out_port = last if i == len(route.nodes) - 1 else route.spans[i]
            cmds.append(CrossConnect(node, in_port, out_port))
        return cmds

    def install_path(self, route: Route, conn_id: str, kind: str = "quantum_secured") -> list[CrossConnect]:
        """Claim every port on the route for ``conn_id``; fails fast on conflict."""
        cmds = self.path_commands(route, kind)
        wanted = [p for c in cmds for p in (f"{c.node}/{c.in_port}", f"{c.node}/{c.out_port}")]
        for port in wanted:
            owner = self.ports.get(port)
            if owner is not None and owner != conn_id:
                raise PortConflict(f"port {port} already cross-connected for {owner}")
        for port in wanted:
            self.ports[port] = conn_id
        return cmds

    def release_ports(self, conn_id: str):
        for port in [p for p, owner in self.ports.items() if owner == conn_id]:
            del self.ports[port]

    def _release_devices(self, conn_id: str):
        for dev in [d for d, owner in self.busy_devices.items() if owner == conn_id]:
            del self.busy_devices[dev]

    def next_route(self, conn: ConnectionState) -> Route | None:
        """Advance the cursor; ``None`` means the route list is exhausted."""
        conn.cursor += 1
        return conn.route

    def _establish(self, conn: ConnectionState, now: float):
        """RouteSelected -> PathInstalled (-> QkdStarting) on the cursor route."""
        route = conn.route
        kind = conn.request.kind
        if conn.request.quantum:
            pair = self._pair_for(route)
            for dev in pair:
                owner = self.busy_devices.get(dev)
                if owner is not None and owner != conn.conn_id:
                    raise DeviceBusy(f"{dev} busy with {owner}")
        conn.commands = tuple(self.install_path(route, conn.conn_id, kind))
        self._move(conn, ConnState.PATH_INSTALLED, now)
        for cmd in conn.commands:
            self._emit(now, conn, "cross_connect", action=str(cmd))
        if not conn.request.quantum:
            return
        pair = self._pair_for(route)
        conn.attempts += 1
        conn.session = session_start(pair, route, self._session_seed(conn), now, self.topology)
        for dev in pair:
            self.busy_devices[dev] = conn.conn_id
        self.store_for(pair)
        self._move(conn, ConnState.QKD_STARTING, now)
        self._emit(now, conn, "qkd_start", action=f"{pair[0]}-{pair[1]} warmup={conn.session.warmup_s:.1f}s")

    def handle_request(self, request: ConnectionRequest, now: float) -> ConnectionState:
        self._conn_counter += 1
        conn_id = f"C{self._conn_counter}"
        routes = self.route_table.routes(request.src, request.dst)
        conn = ConnectionState(conn_id, request, routes)
        self.connections[conn_id] = conn
        self._emit(now, conn_id, "request", action=f"{request.kind} {request.src}->{request.dst}")
        if not routes:
            self._move(conn, ConnState.FAILED, now)
            self._emit(now, conn, "no_route", action="Fail")
            return conn
        self._move(conn, ConnState.ROUTE_SELECTED, now)
        try:
            self._establish(conn, now)
        except (DeviceBusy, PortConflict):
            self.release_ports(conn_id)
            self._move(conn, ConnState.FAILED, now)
            raise
        return conn

    def on_session_generating(self, conn_id: str, now: float):
        conn = self.connections[conn_id]
        if conn.state is ConnState.QKD_STARTING:
            self._move(conn, ConnState.MONITORING, now)

    def classical_check(self, conn: ConnectionState, now: float) -> bool | None:
        plan = conn.request.plan
        if plan is None or not plan.classical_channels or conn.route is None:
            return None
        checks = classical_feasibility(plan, conn.route, self.physical, self.sensitivity_dbm)
        ok = all(c.feasible for c in checks)
        worst = min(c.received_dbm for c in checks)
        self._emit(now, conn, "classical_check", action=f"{'ok' if ok else 'below_sensitivity'} "
                                                        f"min_rx={worst:.2f}dBm")
        return ok

    def on_qkd_report(self, conn_id: str, report: KeyRateReport, now: float) -> Action:
        conn = self.connections.get(conn_id)
        if conn is None or conn.state not in (ConnState.QKD_STARTING, ConnState.MONITORING,
                                              ConnState.ENCRYPTION_ACTIVE):
            raise StaleReport(f"report for {conn_id} in state {None if conn is None else conn.state}")
        if conn.state is ConnState.QKD_STARTING:
            self._move(conn, ConnState.MONITORING, now)
        conn.last_report = report
        self.classical_check(conn, now)
        if report.qber_pct < self.threshold_pct:
            if conn.state is ConnState.MONITORING:
                conn.tunnel = open_tunnel((conn.request.src, conn.request.dst), now, self.rekey_interval_s)
                self._move(conn, ConnState.ENCRYPTION_ACTIVE, now)
                action = Action.ACCEPT
            else:
                action = Action.CONTINUE
            self._emit(now, conn, "qkd_report", action.value, report.qber_pct, report.skr_bps)
            return action

        self._emit(now, conn, "qkd_report", Action.REROUTE.value, report.qber_pct, report.skr_bps)
        self._move(conn, ConnState.REROUTING, now)
        self._abandon_route(conn, now)
        while True:
            route = self.next_route(conn)
            if route is None:
                self._move(conn, ConnState.FAILED, now)
                self._emit(now, conn, "routes_exhausted", action=Action.FAIL.value)
                return Action.FAIL
            self._move(conn, ConnState.ROUTE_SELECTED, now)
            try:
                self._establish(conn, now)
            except (DeviceBusy, PortConflict) as exc:
                self.release_ports(conn.conn_id)
                self._emit(now, conn, "route_unavailable", action=str(exc))
                self._move(conn, ConnState.FAILED, now)
                return Action.FAIL
            self._emit(now, conn, "rerouted", action=Action.REROUTE.value)
            return Action.REROUTE

    def _abandon_route(self, conn: ConnectionState, now: float):
        if conn.tunnel is not None:
            conn.tunnel.close()
        if conn.session is not None:
            conn.session.abort(now)
        self.release_ports(conn.conn_id)
        self._release_devices(conn.conn_id)

    def teardown(self, conn_id: str, now: float) -> ConnectionState:
        conn = self.connections[conn_id]
        if conn.state is ConnState.TORN_DOWN:
            self._emit(now, conn, "warning", action="already torn down")
            log.warning("teardown of %s ignored: already torn down", conn_id)
            return conn
        if conn.tunnel is not None:
            conn.tunnel.close()
        if conn.session is not None:
            conn.session.stop(now)
        self.release_ports(conn_id)
        self._release_devices(conn_id)
        self._move(conn, ConnState.TORN_DOWN, now)
        return conn

    def update_route_table(self, topology: Topology | None = None, link_event: LinkEvent | None = None) -> RouteTable:
        """Recompute route lists; live connections keep their own lists."""
        topo = topology or self.topology
        if link_event is not None:
            if link_event.kind == "down":
                topo = topo.without_span(link_event.span_name)
            elif link_event.kind == "up":
                topo = topo.with_span(link_event.span)
                self.physical = self.physical.with_span(link_event.span)
            elif link_event.kind != "noop":
                raise ValueError(f"unknown link event {link_event.kind!r}")
        self.topology = topo
        self.route_table = RouteTable.build(topo, self.max_hops)
        return self.route_table

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.log:
            w.writerow(row.cells())
        return buf.getvalue()
