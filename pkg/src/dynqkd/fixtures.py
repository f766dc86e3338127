"""Bundled testbed data: the four-node mesh, the field links, the no-coexistence measurements and the coexistence anchors."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

from .qkd import AnchorSet, CalibratedParams, Table3Row, calibrate, load_anchors, load_table3_csv
from .topology import Route, Topology, back_to_back_route, load_topology, route_from_spans

# (start node, spans in travel order) for every measured row
TABLE3_ROUTES: dict[str, tuple[str, tuple[str, ...]]] = {
    "B2B": ("N1", ()),
    "L1": ("N2", ("L1",)),
    "L2": ("N2", ("L2",)),
    "L3": ("N2", ("L3",)),
    "L4": ("N3", ("L4",)),
    "L5": ("N1", ("L5",)),
    "L6": ("N3", ("L6",)),
    "L1+L2": ("N3", ("L2", "L1")),
    "L1+L3": ("N4", ("L3", "L1")),
    "L1+L4": ("N2", ("L1", "L4")),
    "L2+L3": ("N3", ("L2", "L3")),
    "L2+L4": ("N2", ("L2", "L4")),
}

FIELD_ROUTES: dict[str, tuple[str, tuple[str, ...]]] = {
    "HPN-WTC": ("HPN", ("HPN-WTC",)),
    "NSQI-WTC": ("NSQI", ("NSQI-HPN", "HPN-WTC")),
}


def read_text(name: str) -> str:
    return resources.files("dynqkd").joinpath("data", name).read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def testbed_topology() -> Topology:
    return load_topology(read_text("testbed_topology.json"))


@lru_cache(maxsize=None)
def field_topology() -> Topology:
    return load_topology(read_text("field_topology.json"))


def table3_route(label: str) -> Route:
    start, spans = TABLE3_ROUTES[label]
    if not spans:
        return back_to_back_route(start)
    return route_from_spans(testbed_topology(), start, spans)


def resolve_route(label: str) -> tuple[Topology, Route]:
    """Map a row/link label to its topology and node walk."""
    if label in TABLE3_ROUTES:
        return testbed_topology(), table3_route(label)
    if label in FIELD_ROUTES:
        start, spans = FIELD_ROUTES[label]
        return field_topology(), route_from_spans(field_topology(), start, spans)
    raise KeyError(f"unknown link label {label!r}")


def table3_rows() -> list[Table3Row]:
    return load_table3_csv(read_text("table3.csv"))


def default_anchors() -> AnchorSet:
    return load_anchors(read_text("anchors.json"))


@lru_cache(maxsize=None)
def default_calibration() -> CalibratedParams:
    return calibrate(table3_rows(), default_anchors(), resolve_route)
