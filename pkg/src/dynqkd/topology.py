"""Node/span graph of the switched metro network and its loss bookkeeping.

Losses are composed component-wise: a route pays the sender and receiver
terminal insertion once, every fibre span it crosses, and one cross-connection
per switching node it traverses (each endpoint plus every pass-through node).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import NoRoute, ParseError, UnderdeterminedError, ValidationError

DEVICE_KINDS = ("alice", "bob", "transponder")
DEFAULT_ATTENUATION_DB_PER_KM = 0.2


@dataclass(frozen=True)
class Device:
    id: str
    kind: str


@dataclass(frozen=True)
class NodeSpec:
    id: str
    oxc_loss_db: float = 1.0
    terminal_tx_loss_db: float | None = 0.0
    terminal_rx_loss_db: float | None = 0.0
    devices: tuple[Device, ...] = ()
    # back-to-back patch between a co-located Alice and Bob
    loopback_loss_db: float = 0.0
    # classical path: transponder couplers, BPRF rejection port, amplifier
    classical_tx_loss_db: float = 0.0
    classical_rx_loss_db: float = 0.0
    edfa_gain_db: float = 0.0
    notes: str = ""

    @property
    def tx_loss(self) -> float:
        return self.terminal_tx_loss_db or 0.0

    @property
    def rx_loss(self) -> float:
        return self.terminal_rx_loss_db or 0.0

    def device(self, kind: str) -> Device | None:
        for dev in self.devices:
            if dev.kind == kind:
                return dev
        return None

    @property
    def alice(self) -> Device | None:
        return self.device("alice")

    @property
    def bob(self) -> Device | None:
        return self.device("bob")


@dataclass(frozen=True)
class FibreSpan:
    a: str
    b: str
    length_km: float
    span_loss_db: float | None = None
    attenuation_db_per_km: float = DEFAULT_ATTENUATION_DB_PER_KM
    name: str = ""

    def __post_init__(self):
        if not self.name:
            object.__setattr__(self, "name", f"{self.a}-{self.b}")

    @property
    def loss_db(self) -> float:
        if self.span_loss_db is not None:
            return self.span_loss_db
        return self.attenuation_db_per_km * self.length_km

    def other_end(self, node_id: str) -> str:
        return self.b if node_id == self.a else self.a


@dataclass(frozen=True)
class Route:
    """Ordered node walk. A single-node route is a back-to-back loopback."""

    nodes: tuple[str, ...]
    spans: tuple[str, ...] = ()

    @property
    def n_cross_connects(self) -> int:
        return len(self.nodes)

    @property
    def endpoints(self) -> tuple[str, str]:
        return self.nodes[0], self.nodes[-1]

    @property
    def label(self) -> str:
        if not self.spans:
            return "B2B"
        return "+".join(self.spans)

    def __str__(self) -> str:
        return "-".join(self.nodes)


@dataclass(frozen=True)
class Violation:
    element: str
    message: str
    severity: str = "error"  # or "warning"

    def __str__(self) -> str:
        return f"[{self.severity}] {self.element}: {self.message}"


@dataclass(frozen=True)
class Topology:
    nodes: tuple[NodeSpec, ...]
    spans: tuple[FibreSpan, ...]
    _node_index: Mapping[str, NodeSpec] = field(init=False, repr=False, compare=False)
    _span_index: Mapping[str, FibreSpan] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_node_index", MappingProxyType({n.id: n for n in self.nodes}))
        object.__setattr__(self, "_span_index", MappingProxyType({s.name: s for s in self.spans}))

    def node(self, node_id: str) -> NodeSpec:
        try:
            return self._node_index[node_id]
        except KeyError:
            raise ValidationError(f"unknown node {node_id!r}") from None

    def span(self, name: str) -> FibreSpan:
        try:
            return self._span_index[name]
        except KeyError:
            raise ValidationError(f"unknown span {name!r}") from None

    def has_node(self, node_id: str) -> bool:
        return node_id in self._node_index

    def has_span(self, name: str) -> bool:
        return name in self._span_index

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes)

    def incident_spans(self, node_id: str) -> list[FibreSpan]:
        return [s for s in self.spans if node_id in (s.a, s.b)]

    def find_device(self, device_id: str) -> tuple[NodeSpec, Device]:
        for node in self.nodes:
            for dev in node.devices:
                if dev.id == device_id:
                    return node, dev
        raise ValidationError(f"unknown device {device_id!r}")

    def without_span(self, name: str) -> "Topology":
        return Topology(self.nodes, tuple(s for s in self.spans if s.name != name))

    def with_span(self, span: FibreSpan) -> "Topology":
        return Topology(self.nodes, tuple(s for s in self.spans if s.name != span.name) + (span,))

    def to_dict(self) -> dict:
        nodes = []
        for n in self.nodes:
            nodes.append({
                "id": n.id,
                "oxc_loss_db": n.oxc_loss_db,
                "terminal_tx_loss_db": n.terminal_tx_loss_db,
                "terminal_rx_loss_db": n.terminal_rx_loss_db,
                "devices": [{"id": d.id, "kind": d.kind} for d in n.devices],
                "loopback_loss_db": n.loopback_loss_db,
                "classical_tx_loss_db": n.classical_tx_loss_db,
                "classical_rx_loss_db": n.classical_rx_loss_db,
                "edfa_gain_db": n.edfa_gain_db,
            })
        spans = []
        for s in self.spans:
            d = {"name": s.name, "a": s.a, "b": s.b, "length_km": s.length_km,
                 "attenuation_db_per_km": s.attenuation_db_per_km}
            if s.span_loss_db is not None:
                d["span_loss_db"] = s.span_loss_db
            spans.append(d)
        return {"nodes": nodes, "spans": spans}


# --------------------------------------------------------------------------
# loading and validation

def _parse_device(raw, node_id: str) -> Device:
    if isinstance(raw, str):
        kind = raw.lower()
        return Device(id=f"{kind}@{node_id}", kind=kind)
    if not isinstance(raw, Mapping) or "kind" not in raw:
        raise ParseError(f"node {node_id}: device entries need a 'kind'")
    kind = str(raw["kind"]).lower()
    return Device(id=str(raw.get("id", f"{kind}@{node_id}")), kind=kind)


def _opt_float(raw: Mapping, key: str, default):
    value = raw.get(key, default)
    return None if value is None else float(value)


def topology_from_dict(data: Mapping) -> Topology:
    try:
        raw_nodes = data["nodes"]
        raw_spans = data.get("spans", [])
        nodes = []
        for rn in raw_nodes:
            nid = str(rn["id"])
            nodes.append(NodeSpec(
                id=nid,
                oxc_loss_db=float(rn.get("oxc_loss_db", 1.0)),
                terminal_tx_loss_db=_opt_float(rn, "terminal_tx_loss_db", 0.0),
                terminal_rx_loss_db=_opt_float(rn, "terminal_rx_loss_db", None),
                devices=tuple(_parse_device(d, nid) for d in rn.get("devices", [])),
                loopback_loss_db=float(rn.get("loopback_loss_db", 0.0)),
                classical_tx_loss_db=float(rn.get("classical_tx_loss_db", 0.0)),
                classical_rx_loss_db=float(rn.get("classical_rx_loss_db", 0.0)),
                edfa_gain_db=float(rn.get("edfa_gain_db", 0.0)),
                notes=str(rn.get("notes", "")),
            ))
        spans = []
        for rs in raw_spans:
            spans.append(FibreSpan(
                a=str(rs["a"]),
                b=str(rs["b"]),
                length_km=float(rs.get("length_km", 0.0)),
                span_loss_db=_opt_float(rs, "span_loss_db", None),
                attenuation_db_per_km=float(rs.get("attenuation_db_per_km", DEFAULT_ATTENUATION_DB_PER_KM)),
                name=str(rs.get("name", "")),
            ))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed topology: {exc!r}") from exc
    return Topology(tuple(nodes), tuple(spans))


def validate(topology: Topology) -> list[Violation]:
    """List every invariant violation; empty means the topology is usable."""
    out: list[Violation] = []
    if not topology.nodes:
        out.append(Violation("nodes", "node list is empty"))
    seen: set[str] = set()
    device_ids: set[str] = set()
    for n in topology.nodes:
        if n.id in seen:
            out.append(Violation(n.id, "duplicate node id"))
        seen.add(n.id)
        if n.oxc_loss_db < 0:
            out.append(Violation(n.id, f"negative oxc_loss_db {n.oxc_loss_db}"))
        for attr in ("terminal_tx_loss_db", "terminal_rx_loss_db", "loopback_loss_db",
                     "classical_tx_loss_db", "classical_rx_loss_db", "edfa_gain_db"):
            v = getattr(n, attr)
            if v is not None and v < 0:
                out.append(Violation(n.id, f"negative {attr} {v}"))
        for d in n.devices:
            if d.kind not in DEVICE_KINDS:
                out.append(Violation(f"{n.id}/{d.id}", f"unknown device kind {d.kind!r}"))
            if d.id in device_ids:
                out.append(Violation(f"{n.id}/{d.id}", "duplicate device id"))
            device_ids.add(d.id)
        if n.bob is not None and n.terminal_rx_loss_db is None:
            out.append(Violation(n.id, "Bob terminal without declared receive-side (BPRF) loss",
                                 severity="warning"))
    span_names: set[str] = set()
    for s in topology.spans:
        if s.name in span_names:
            out.append(Violation(s.name, "duplicate span name"))
        span_names.add(s.name)
        for end in (s.a, s.b):
            if end not in seen:
                out.append(Violation(s.name, f"references unknown node {end!r}"))
        if s.a == s.b:
            out.append(Violation(s.name, "span is a self-loop"))
        if s.length_km < 0:
            out.append(Violation(s.name, f"negative length {s.length_km}"))
        if s.span_loss_db is not None and s.span_loss_db < 0:
            out.append(Violation(s.name, f"negative span loss {s.span_loss_db}"))
        if s.attenuation_db_per_km < 0:
            out.append(Violation(s.name, f"negative attenuation {s.attenuation_db_per_km}"))
    return out


def load_topology(config_text: str) -> Topology:
    """Parse JSON topology text and reject it if any error-class violation exists."""
    try:
        data = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc)) from exc
    if not isinstance(data, Mapping):
        raise ParseError("topology document must be an object")
    topo = topology_from_dict(data)
    errors = [v for v in validate(topo) if v.severity == "error"]
    if errors:
        raise ValidationError("; ".join(str(v) for v in errors))
    return topo


# --------------------------------------------------------------------------
# routes and losses

def route_loss(topology: Topology, route: Route) -> float:
    src, dst = route.endpoints
    total = topology.node(src).tx_loss + topology.node(dst).rx_loss
    total += sum(topology.node(n).oxc_loss_db for n in route.nodes)
    total += sum(topology.span(s).loss_db for s in route.spans)
    if len(route.nodes) == 1:
        total += topology.node(src).loopback_loss_db
    return total


def back_to_back_route(node_id: str) -> Route:
    return Route(nodes=(node_id,))


def route_from_spans(topology: Topology, src: str, span_names: Sequence[str]) -> Route:
    """Build the node walk starting at ``src`` across the named spans in order."""
    nodes = [src]
    for name in span_names:
        span = topology.span(name)
        here = nodes[-1]
        if here not in (span.a, span.b):
            raise ValidationError(f"span {name} is not incident to {here}")
        nodes.append(span.other_end(here))
    return Route(nodes=tuple(nodes), spans=tuple(span_names))


def enumerate_routes(topology: Topology, src: str, dst: str, max_hops: int = 3) -> list[Route]:
    """All simple paths of at most ``max_hops`` spans, cheapest first."""
    if src == dst:
        raise ValueError("source and destination must differ")
    if max_hops < 1:
        raise ValueError("max_hops must be >= 1")
    topology.node(src)
    topology.node(dst)

    found: list[Route] = []

    def walk(nodes: list[str], spans: list[str]):
        here = nodes[-1]
        if here == dst:
            found.append(Route(tuple(nodes), tuple(spans)))
            return
        if len(spans) == max_hops:
            return
        for span in topology.incident_spans(here):
            nxt = span.other_end(here)
            if nxt in nodes:
                continue
            nodes.append(nxt)
            spans.append(span.name)
            walk(nodes, spans)
            nodes.pop()
            spans.pop()

    walk([src], [])
    if not found:
        raise NoRoute(f"no route {src} -> {dst} within {max_hops} hops")
    found.sort(key=lambda r: (round(route_loss(topology, r), 9), r.nodes, r.spans))
    return found


# --------------------------------------------------------------------------
# fitting component losses from end-to-end budgets

@dataclass(frozen=True)
class RouteDescriptor:
    """A measured route reduced to what the loss model can see."""

    label: str
    spans: tuple[str, ...]
    n_cross_connects: int


@dataclass(frozen=True)
class LossDecomposition:
    terminal_total_db: float
    per_span_db: Mapping[str, float]
    oxc_db: float
    residuals_db: Mapping[str, float]

    def predict(self, descriptor: RouteDescriptor) -> float:
        return (self.terminal_total_db
                + sum(self.per_span_db[s] for s in descriptor.spans)
                + descriptor.n_cross_connects * self.oxc_db)

    @property
    def max_abs_residual_db(self) -> float:
        return max((abs(r) for r in self.residuals_db.values()), default=0.0)


def fit_component_losses(
    measured_rows: Iterable[tuple[RouteDescriptor, float]],
    oxc_db: float = 1.0,
) -> LossDecomposition:
    """Least-squares terminal and per-span losses with the switch loss held fixed.

    Residuals are reported as predicted minus measured, per row label.
    """
    rows = list(measured_rows)
    span_names = sorted({s for d, _ in rows for s in d.spans})
    n_unknown = 1 + len(span_names)
    col = {s: i + 1 for i, s in enumerate(span_names)}
    a = np.zeros((len(rows), n_unknown))
    b = np.zeros(len(rows))
    for i, (desc, budget) in enumerate(rows):
        a[i, 0] = 1.0
        for s in desc.spans:
            a[i, col[s]] += 1.0
        b[i] = budget - desc.n_cross_connects * oxc_db
    if len(rows) < n_unknown or np.linalg.matrix_rank(a) < n_unknown:
        raise UnderdeterminedError(
            f"{len(rows)} rows cannot identify {n_unknown} unknowns (terminal + {span_names})")
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    resid = a @ x - b
    return LossDecomposition(
        terminal_total_db=float(x[0]),
        per_span_db=MappingProxyType({s: float(x[col[s]]) for s in span_names}),
        oxc_db=oxc_db,
        residuals_db=MappingProxyType({d.label: float(r) for (d, _), r in zip(rows, resid)}),
    )


def min_qkd_pairs(n_nodes: int, mode: str) -> int:
    """QKD device pairs needed for a direct link between every node pair."""
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    if mode == "switched":
        return n_nodes
    if mode == "static_full_mesh":
        return n_nodes * (n_nodes - 1) // 2
    raise ValueError(f"unknown mode {mode!r}")
