"""Steady-state experiment presets and their CSV reports.

Sweeps call ``estimate_link`` directly, the same function the event engine
uses, so the two views of a link cannot drift apart.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .channel import BOB_FILTER, TESTBED_FREQS_THZ, ChannelPlan, FilterSpec, classical_feasibility
from .fixtures import TABLE3_ROUTES, read_text, resolve_route
from .qkd import CalibratedParams, estimate_link, load_anchors
from .topology import route_loss

POWER_STEP_DB = 1.0
BANDWIDTH_STEP_GHZ = 25.0
POWER_SWEEP_LINKS = ("L1", "L2", "L3", "L4", "L1+L2", "L1+L3")
FIELD_LINKS = ("HPN-WTC", "NSQI-WTC")
FIELD_FREQS_THZ = (193.50, 193.55, 193.60, 193.65, 193.70, 193.75)
FIELD_LAUNCH_DBM = 0.0

DEFAULT_POWERS_DBM = tuple(float(p) for p in np.arange(-10.0, 12.0 + POWER_STEP_DB, POWER_STEP_DB))
DEFAULT_BANDWIDTHS_GHZ = tuple(float(b) for b in np.arange(500.0, 1000.0 + BANDWIDTH_STEP_GHZ, BANDWIDTH_STEP_GHZ))

TABLE3_COLUMNS = ("link", "budget_db", "qber_pct", "skr_bps")
SWEEP_COLUMNS = ("link", "n_channels", "variable", "value", "qber_pct", "skr_bps", "classical_feasible")


@dataclass(frozen=True)
class SweepPoint:
    value: float
    qber_pct: float
    skr_bps: float
    classical_feasible: bool
    aborted: bool = False


@dataclass(frozen=True)
class SweepResult:
    link: str
    n_channels: int
    variable: str  # launch_power_dbm | filter_bandwidth_ghz | n_channels
    points: tuple[SweepPoint, ...]

    def __post_init__(self):
        pts = tuple(sorted(self.points, key=lambda p: p.value))
        object.__setattr__(self, "points", pts)

    @property
    def values(self) -> list[float]:
        return [p.value for p in self.points]

    @property
    def skr(self) -> list[float]:
        return [p.skr_bps for p in self.points]

    @property
    def qber(self) -> list[float]:
        return [p.qber_pct for p in self.points]

    def at(self, value: float) -> SweepPoint:
        for p in self.points:
            if abs(p.value - value) < 1e-9:
                return p
        raise KeyError(value)

    def first_zero(self) -> float | None:
        """Smallest swept value where no key is produced."""
        return next((p.value for p in self.points if p.skr_bps == 0.0), None)

    def rows(self) -> list[list[str]]:
        return [[self.link, str(self.n_channels), self.variable, f"{p.value:g}", f"{p.qber_pct:.4f}",
                 f"{p.skr_bps:.2f}", str(p.classical_feasible).lower()] for p in self.points]


@dataclass(frozen=True)
class Table3Estimate:
    link: str
    budget_db: float
    qber_pct: float
    skr_bps: float


def _comb_spec(calibrated: CalibratedParams) -> dict:
    fspec = calibrated.report.get("comb_filter") if calibrated.report else None
    if not fspec:
        fspec = load_anchors(read_text("anchors.json")).comb_filter
    return dict(fspec)


def preset_table3(calibrated: CalibratedParams) -> list[Table3Estimate]:
    out = []
    for label in TABLE3_ROUTES:
        topo, route = resolve_route(label)
        est = estimate_link(topo, route, None, BOB_FILTER, calibrated)
        out.append(Table3Estimate(label, route_loss(topo, route), est.qber_pct, est.skr_bps))
    return out


def _point(value: float, plan: ChannelPlan, link: str, calibrated: CalibratedParams) -> SweepPoint:
    topo, route = resolve_route(link)
    est = estimate_link(topo, route, plan, BOB_FILTER, calibrated)
    feasible = all(c.feasible for c in classical_feasibility(plan, route, topo))
    return SweepPoint(value, est.qber_pct, est.skr_bps, feasible, est.aborted)


def preset_power_sweep(link: str, n_channels: int, powers_dbm: Sequence[float],
                       calibrated: CalibratedParams) -> SweepResult:
    if link not in POWER_SWEEP_LINKS:
        raise ValueError(f"power sweeps run on {POWER_SWEEP_LINKS}, not {link!r}")
    if n_channels not in (1, 4):
        raise ValueError("power sweeps use 1 or 4 classical channels")
    base = ChannelPlan.uniform(TESTBED_FREQS_THZ[:n_channels], 0.0)
    pts = [_point(float(p), base.with_power(float(p)), link, calibrated) for p in powers_dbm]
    return SweepResult(link, n_channels, "launch_power_dbm", tuple(pts))


def preset_filter_sweep(field_link: str, bandwidths_ghz: Sequence[float],
                        calibrated: CalibratedParams) -> SweepResult:
    if field_link not in FIELD_LINKS:
        raise ValueError(f"filter sweeps run on {FIELD_LINKS}, not {field_link!r}")
    fspec = _comb_spec(calibrated)
    pts = []
    for bw in bandwidths_ghz:
        comb = FilterSpec(**{**fspec, "bandwidth_ghz": float(bw)})
        plan = ChannelPlan.uniform(FIELD_FREQS_THZ, FIELD_LAUNCH_DBM, comb_filter=comb)
        pts.append(_point(float(bw), plan, field_link, calibrated))
    return SweepResult(field_link, len(FIELD_FREQS_THZ), "filter_bandwidth_ghz", tuple(pts))


def fig4a(calibrated, powers=DEFAULT_POWERS_DBM) -> list[SweepResult]:
    return [preset_power_sweep(l, 1, powers, calibrated) for l in ("L1", "L2", "L3", "L4")]


def fig4b(calibrated, powers=DEFAULT_POWERS_DBM) -> list[SweepResult]:
    return [preset_power_sweep(l, 4, powers, calibrated) for l in ("L1", "L2", "L3", "L4")]


def fig4cd(calibrated, powers=DEFAULT_POWERS_DBM) -> list[SweepResult]:
    return [preset_power_sweep(l, 4, powers, calibrated) for l in ("L1+L2", "L1+L3")]


def fig5(calibrated, bandwidths=DEFAULT_BANDWIDTHS_GHZ) -> list[SweepResult]:
    return [preset_filter_sweep(l, bandwidths, calibrated) for l in FIELD_LINKS]


PRESETS = {"table3": preset_table3, "fig4a": fig4a, "fig4b": fig4b, "fig4cd": fig4cd, "fig5": fig5}


# --------------------------------------------------------------------------
# reporting

def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def table3_csv(rows: Sequence[Table3Estimate]) -> str:
    return _csv(TABLE3_COLUMNS, [[r.link, f"{r.budget_db:.2f}", f"{r.qber_pct:.4f}", f"{r.skr_bps:.2f}"]
                                 for r in rows])


def sweep_csv(results: Sequence[SweepResult]) -> str:
    return _csv(SWEEP_COLUMNS, [row for res in results for row in res.rows()])


def render(name: str, result) -> str:
    if name == "table3":
        return table3_csv(result)
    if isinstance(result, SweepResult):
        result = [result]
    return sweep_csv(result)


def emit_report(results: Mapping[str, object], out_path: str | Path) -> list[Path]:
    """One CSV per named result plus ``summary.csv``; output is byte-stable."""
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summary = []
    for name in sorted(results):
        text = render(name, results[name])
        path = out / f"{name}.csv"
        path.write_text(text, encoding="utf-8")
        written.append(path)
        summary.append([name, path.name, str(text.count("\n") - 1)])
    path = out / "summary.csv"
    path.write_text(_csv(("result", "file", "rows"), summary), encoding="utf-8")
    written.append(path)
    return written


def run_preset(name: str, calibrated: CalibratedParams):
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name](calibrated)
