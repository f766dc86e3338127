"""Deterministic discrete-event loop that drives the controller, devices and KMS.

Events are ordered by (time, priority, insertion index). Controller work runs
before device reports, which run before key accounting, so a replay with the
same scenario and seed yields the same log byte for byte.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .channel import BOB_FILTER, ChannelPlan
from .controller import Action, ConnectionRequest, ConnState, Controller, LinkEvent
from .errors import DeviceBusy, ParseError, PortConflict, ScheduleError, UncalibratedError
from .kms import (DEFAULT_REKEY_INTERVAL_S, NotGenerating, SessionState, TunnelState, session_report,
                  store_stats, tunnel_tick)
from .qkd import CalibratedParams, QkdLinkEstimate, estimate_link
from .topology import FibreSpan, Route, Topology, load_topology, topology_from_dict

PRIORITY_CONTROLLER = 0
PRIORITY_DEVICE = 1
PRIORITY_KMS = 2

FAULT_KINDS = ("force_qber", "clear_qber", "link_down", "link_up")


@dataclass(frozen=True)
class ScheduledRequest:
    time_s: float
    request: ConnectionRequest
    teardown_at_s: float | None = None


@dataclass(frozen=True)
class Fault:
    """``force_qber`` pins the QBER of any route through ``span``; link events edit the topology."""

    time_s: float
    kind: str
    span: str
    qber_pct: float | None = None
    span_spec: FibreSpan | None = None


@dataclass(frozen=True)
class Scenario:
    topology: Topology
    requests: tuple[ScheduledRequest, ...]
    duration_s: float
    seed: int = 0
    faults: tuple[Fault, ...] = ()
    plans: Mapping[str, ChannelPlan] = field(default_factory=dict)
    rekey_interval_s: float = DEFAULT_REKEY_INTERVAL_S
    report_sigma: float = 0.05

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ScheduleError("duration must be positive")
        times = [r.time_s for r in self.requests]
        if times != sorted(times):
            raise ScheduleError("request schedule must be sorted by time")
        ftimes = [f.time_s for f in self.faults]
        if ftimes != sorted(ftimes):
            raise ScheduleError("fault schedule must be sorted by time")
        for t in times + ftimes:
            if t < 0:
                raise ScheduleError(f"negative event time {t}")
        for f in self.faults:
            if f.kind not in FAULT_KINDS:
                raise ScheduleError(f"unknown fault kind {f.kind!r}")


def _resolve_topology(ref: Any, base_dir: Path | None) -> Topology:
    from . import fixtures

    if isinstance(ref, Mapping):
        return topology_from_dict(ref)
    if ref == "testbed":
        return fixtures.testbed_topology()
    if ref == "field":
        return fixtures.field_topology()
    path = Path(ref)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    return load_topology(path.read_text(encoding="utf-8"))


def scenario_from_dict(doc: Mapping, base_dir: Path | None = None, seed: int | None = None) -> Scenario:
    try:
        topo = _resolve_topology(doc.get("topology", "testbed"), base_dir)
        plans = {name: ChannelPlan.from_dict(p) for name, p in doc.get("plans", {}).items()}
        reqs = []
        for r in doc.get("requests", []):
            plan = plans[r["plan"]] if r.get("plan") else None
            req = ConnectionRequest(r["src"], r["dst"], r.get("kind", "quantum_secured"), plan)
            teardown = r.get("teardown_at_s")
            reqs.append(ScheduledRequest(float(r.get("time_s", 0.0)), req,
                                         None if teardown is None else float(teardown)))
        faults = []
        for f in doc.get("faults", []):
            spec = f.get("span_spec")
            faults.append(Fault(
                float(f["time_s"]), f["kind"], f.get("span", spec["name"] if spec else ""),
                None if f.get("qber_pct") is None else float(f["qber_pct"]),
                None if spec is None else FibreSpan(**spec),
            ))
        return Scenario(
            topology=topo,
            requests=tuple(reqs),
            duration_s=float(doc["duration_s"]),
            seed=int(doc.get("seed", 0) if seed is None else seed),
            faults=tuple(faults),
            plans=plans,
            rekey_interval_s=float(doc.get("rekey_interval_s", DEFAULT_REKEY_INTERVAL_S)),
            report_sigma=float(doc.get("report_sigma", 0.05)),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed scenario: {exc!r}") from exc


def load_scenario(path: str | Path, seed: int | None = None) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return scenario_from_dict(doc, path.parent, seed)


# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EventRecord:
    timestamp_s: float
    source: str
    event: str
    detail: str = ""


EVENT_COLUMNS = ("timestamp_s", "source", "event", "detail")


@dataclass
class EventLog:
    records: list[EventRecord] = field(default_factory=list)

    def append(self, t: float, source: str, event: str, detail: str = ""):
        if self.records and t < self.records[-1].timestamp_s:
            raise ScheduleError(f"time went backwards: {t} < {self.records[-1].timestamp_s}")
        self.records.append(EventRecord(t, source, event, detail))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for r in self.records:
            w.writerow([f"{r.timestamp_s:.3f}", r.source, r.event, r.detail])
        return buf.getvalue()

    def find(self, event: str, source: str | None = None) -> list[EventRecord]:
        return [r for r in self.records if r.event == event and (source is None or r.source == source)]

    def __len__(self):
        return len(self.records)


@dataclass
class RunResult:
    log: EventLog
    controller: Controller
    summary: list[dict]
    end_time_s: float

    def files(self) -> dict[str, str]:
        from .kms import audit_csv

        return {
            "events.csv": self.log.to_csv(),
            "controller_log.csv": self.controller.log_csv(),
            "kms_audit.csv": audit_csv(self.controller.stores[k] for k in sorted(self.controller.stores)),
            "summary.csv": _summary_csv(self.summary),
        }

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, text in self.files().items():
            p = out / name
            p.write_text(text, encoding="utf-8")
            written.append(p)
        return written


SUMMARY_COLUMNS = ("conn_id", "src", "dst", "kind", "final_state", "route", "attempts",
                   "last_qber_pct", "last_skr_bps", "tunnel_rekeys", "tunnel_starvations",
                   "generated_bits", "consumed_bits", "buffer_bits")


def _summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


class Engine:
    """Single-scenario event loop; build one per run."""

    def __init__(self, scenario: Scenario, calibrated: CalibratedParams | None):
        if calibrated is None:
            raise UncalibratedError("the engine needs calibrated link parameters")
        self.scenario = scenario
        self.calibrated = calibrated
        self.controller = Controller(scenario.topology, seed=scenario.seed,
                                     rekey_interval_s=scenario.rekey_interval_s)
        self.log = EventLog()
        self.now = 0.0
        self._queue: list[tuple[float, int, int, str, Callable[[], None]]] = []
        self._seq = 0
        self._forced: dict[str, float] = {}
        self._down: set[str] = set()
        self._rng = np.random.default_rng(np.random.SeedSequence([scenario.seed, 0x51]))
        self._estimates: dict[tuple[str, tuple], QkdLinkEstimate] = {}

    # ------------------------------------------------------------- scheduling

    def schedule(self, t: float, priority: int, name: str, fn: Callable[[], None]):
        if t < self.now:
            raise ScheduleError(f"cannot schedule {name} at {t} before now={self.now}")
        heapq.heappush(self._queue, (t, priority, self._seq, name, fn))
        self._seq += 1

    def run(self) -> RunResult:
        for sr in self.scenario.requests:
            self.schedule(sr.time_s, PRIORITY_CONTROLLER, "request", lambda sr=sr: self._on_request(sr))
        for fault in self.scenario.faults:
            self.schedule(fault.time_s, PRIORITY_CONTROLLER, "fault", lambda f=fault: self._on_fault(f))
        while self._queue and self._queue[0][0] <= self.scenario.duration_s:
            t, _, _, _, fn = heapq.heappop(self._queue)
            self.now = t
            fn()
        self.now = self.scenario.duration_s
        self.log.append(self.now, "engine", "end", f"pending={len(self._queue)}")
        return RunResult(self.log, self.controller, self._summary(), self.now)

    # --------------------------------------------------------------- handlers

    def _on_request(self, sr: ScheduledRequest):
        req = sr.request
        self.log.append(self.now, "controller", "request", f"{req.kind} {req.src}->{req.dst}")
        try:
            conn = self.controller.handle_request(req, self.now)
        except (DeviceBusy, PortConflict) as exc:
            self.log.append(self.now, "controller", "rejected", f"{type(exc).__name__}: {exc}")
            return
        self.log.append(self.now, "controller", "state", f"{conn.conn_id} {conn.state.value} {conn.route or ''}")
        if conn.state is ConnState.QKD_STARTING:
            self._schedule_session(conn.conn_id)
        if sr.teardown_at_s is not None:
            self.schedule(sr.teardown_at_s, PRIORITY_CONTROLLER, "teardown",
                          lambda cid=conn.conn_id: self._on_teardown(cid))

    def _schedule_session(self, conn_id: str):
        conn = self.controller.connections[conn_id]
        session = conn.session
        self.log.append(self.now, "device", "session_start",
                        f"{conn_id} {session.pair_id[0]}-{session.pair_id[1]} warmup={session.warmup_s:.3f}")
        self.schedule(session.generating_at, PRIORITY_DEVICE, "generating",
                      lambda: self._on_generating(conn_id, session))
        self.schedule(session.first_report_at, PRIORITY_DEVICE, "report",
                      lambda: self._on_device_report(conn_id, session))

    def _current(self, conn_id: str, session) -> bool:
        conn = self.controller.connections[conn_id]
        return conn.session is session and session.active

    def _on_generating(self, conn_id: str, session):
        if not self._current(conn_id, session):
            self.log.append(self.now, "device", "stale_event", f"{conn_id} generating")
            return
        session.advance(self.now)
        self.controller.on_session_generating(conn_id, self.now)
        self.log.append(self.now, "device", "generating", f"{conn_id} {session.pair_id[0]}-{session.pair_id[1]}")

    def _estimate(self, conn) -> QkdLinkEstimate:
        route: Route = conn.route
        plan = conn.request.plan if conn.request.kind == "coexistence" else None
        if any(s in self._down for s in route.spans):
            return QkdLinkEstimate(50.0, 0.0, 0.0, 0.0, 0.0, True, float("inf"))
        key = (str(route), None if plan is None else json.dumps(plan.to_dict(), sort_keys=True))
        est = self._estimates.get(key)
        if est is None:
            est = estimate_link(self.scenario.topology, route, plan, BOB_FILTER, self.calibrated)
            self._estimates[key] = est
        forced = [self._forced[s] for s in route.spans if s in self._forced]
        if forced:
            q = max(forced)
            aborted = q >= self.calibrated.device.qber_abort_threshold_pct
            est = QkdLinkEstimate(q, 0.0 if aborted else est.skr_bps, est.signal_rate, est.dark_rate,
                                  est.noise_rate, aborted, est.loss_db, est.noise)
        return est

    def _on_device_report(self, conn_id: str, session):
        if not self._current(conn_id, session):
            self.log.append(self.now, "device", "stale_event", f"{conn_id} report")
            return
        conn = self.controller.connections[conn_id]
        store = self.controller.store_for(session.pair_id)
        try:
            report = session_report(session, self._estimate(conn), self._rng, store, self.now,
                                    self.scenario.report_sigma, push=False)
        except NotGenerating:
            self.log.append(self.now, "device", "stale_event", f"{conn_id} not generating")
            return
        self.log.append(self.now, "device", "report",
                        f"{conn_id} qber={report.qber_pct:.4f} skr={report.skr_bps:.2f} bits={report.bits}")
        if report.bits > 0:
            self.schedule(self.now, PRIORITY_KMS, "kms_push",
                          lambda: self._on_kms_push(store, report.bits, conn_id))
        self.schedule(self.now, PRIORITY_CONTROLLER, "qkd_report",
                      lambda: self._on_controller_report(conn_id, session, report))
        self.schedule(self.now + session.report_interval_s, PRIORITY_DEVICE, "report",
                      lambda: self._on_device_report(conn_id, session))

    def _on_kms_push(self, store, bits: int, conn_id: str):
        store.push_key_block(bits, self.now)
        self.log.append(self.now, "kms", "push", f"{conn_id} {store.pair_id[0]}-{store.pair_id[1]} "
                                                 f"bits={bits} buffer={store.buffer_bits}")

    def _on_controller_report(self, conn_id: str, session, report):
        conn = self.controller.connections[conn_id]
        if conn.session is not session:
            self.log.append(self.now, "controller", "stale_event", f"{conn_id} report")
            return
        action = self.controller.on_qkd_report(conn_id, report, self.now)
        self.log.append(self.now, "controller", "action",
                        f"{conn_id} {action.value} qber={report.qber_pct:.4f} route={conn.route or ''}")
        if action is Action.ACCEPT:
            tunnel = conn.tunnel
            self.log.append(self.now, "controller", "tunnel_open", f"{conn_id} {tunnel.endpoints[0]}-{tunnel.endpoints[1]}")
            self.schedule(self.now, PRIORITY_KMS, "rekey", lambda: self._on_rekey(conn_id, tunnel))
        elif action is Action.REROUTE:
            self.log.append(self.now, "controller", "reroute", f"{conn_id} -> {conn.route}")
            self._schedule_session(conn_id)
        elif action is Action.FAIL:
            self.log.append(self.now, "controller", "failed", conn_id)

    def _on_rekey(self, conn_id: str, tunnel):
        if tunnel.state is TunnelState.CLOSED:
            return
        conn = self.controller.connections[conn_id]
        store = self.controller.store_for(conn.session.pair_id)
        state = tunnel_tick(tunnel, store, self.now)
        self.log.append(self.now, "kms", "rekey" if state is TunnelState.OPEN else "starved",
                        f"{conn_id} buffer={store.buffer_bits}")
        self.schedule(tunnel.next_rekey_at, PRIORITY_KMS, "rekey", lambda: self._on_rekey(conn_id, tunnel))

    def _on_teardown(self, conn_id: str):
        conn = self.controller.teardown(conn_id, self.now)
        self.log.append(self.now, "controller", "teardown", f"{conn_id} {conn.state.value}")

    def _on_fault(self, fault: Fault):
        if fault.kind == "force_qber":
            self._forced[fault.span] = float(fault.qber_pct)
        elif fault.kind == "clear_qber":
            self._forced.pop(fault.span, None)
        elif fault.kind == "link_down":
            self._down.add(fault.span)
            self.controller.update_route_table(link_event=LinkEvent("down", fault.span))
        elif fault.kind == "link_up":
            self._down.discard(fault.span)
            if fault.span_spec is not None and not self.controller.topology.has_span(fault.span):
                self.controller.update_route_table(link_event=LinkEvent("up", fault.span, fault.span_spec))
        self.log.append(self.now, "engine", "fault",
                        f"{fault.kind} {fault.span}" + ("" if fault.qber_pct is None else f" qber={fault.qber_pct}"))

    # ---------------------------------------------------------------- summary

    def _summary(self) -> list[dict]:
        rows = []
        for conn_id, conn in self.controller.connections.items():
            rep = conn.last_report
            store = self.controller.stores.get(conn.pair_id) if conn.pair_id else None
            st = store_stats(store, self.now) if store is not None else None
            rows.append({
                "conn_id": conn_id,
                "src": conn.request.src,
                "dst": conn.request.dst,
                "kind": conn.request.kind,
                "final_state": conn.state.value if conn.state else "",
                "route": "" if conn.route is None else str(conn.route),
                "attempts": conn.attempts,
                "last_qber_pct": "" if rep is None else f"{rep.qber_pct:.4f}",
                "last_skr_bps": "" if rep is None else f"{rep.skr_bps:.2f}",
                "tunnel_rekeys": 0 if conn.tunnel is None else conn.tunnel.rekeys,
                "tunnel_starvations": 0 if conn.tunnel is None else conn.tunnel.starvations,
                "generated_bits": 0 if store is None else store.generated_bits,
                "consumed_bits": 0 if store is None else store.consumed_bits,
                "buffer_bits": 0 if st is None else st.buffer_bits,
            })
        return rows


def run(scenario: Scenario, calibrated: CalibratedParams | None = None) -> RunResult:
    """Run ``scenario``; falls back to the bundled calibration when none is given."""
    if calibrated is None:
        from .fixtures import default_calibration

        calibrated = default_calibration()
    return Engine(scenario, calibrated).run()


def session_state_at(log: EventLog, conn_id: str, event: str) -> float | None:
    """Time of the first ``event`` record mentioning ``conn_id``."""
    for r in log.records:
        if r.event == event and r.detail.split(" ")[0] == conn_id:
            return r.timestamp_s
    return None


__all__ = [
    "Engine", "EventLog", "EventRecord", "Fault", "RunResult", "Scenario", "ScheduledRequest",
    "SessionState", "load_scenario", "run", "scenario_from_dict", "session_state_at",
]
