"""BB84 link estimates (QBER, SKR) and their calibration against measurements.

The QBER model is intrinsic error plus a dark-count term that grows with
inverse transmittance plus a noise term (noise photons per signal photon).
SKR is phenomenological: a power law in transmittance times the usual
``1 - (1 + f_EC) H2(Q)`` distillation factor, normalised at the reference
(back-to-back) budget, with a hard abort at the QBER threshold.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import brentq, linprog, nnls

from .channel import (BOB_FILTER, ChannelPlan, FilterSpec, NoiseBreakdown, RamanParams,
                      noise_breakdown)
from .errors import CalibrationError, ParseError, UncalibratedError
from .topology import LossDecomposition, Route, RouteDescriptor, Topology, fit_component_losses, route_loss

QBER_ABORT_THRESHOLD_PCT = 6.0
MAX_BUDGET_DB = 10.0
REPORT_INTERVAL_S = 120.0

# Clavis2-like front end used to turn noise photons into errors
PULSE_RATE_HZ = 5e6
MEAN_PHOTON_NUMBER = 0.2
DETECTOR_EFFICIENCY = 0.1
DETECTOR_GATE_S = 1e-9
# QBER (%) per noise photon/s per unit inverse transmittance
DETECTOR_NOISE_QBER_COEFF = 50.0 * DETECTOR_GATE_S / MEAN_PHOTON_NUMBER


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    if p == 0.5:
        return 1.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


@dataclass(frozen=True)
class QkdDeviceParams:
    base_qber_pct: float = 0.0
    qber_loss_coeff: float = 0.0
    skr_ref_bps: float = 0.0
    skr_loss_exponent: float = 1.0
    noise_qber_coeff: float = DETECTOR_NOISE_QBER_COEFF
    ref_loss_db: float = 4.99
    ec_efficiency: float = 1.16
    qber_abort_threshold_pct: float = QBER_ABORT_THRESHOLD_PCT
    max_budget_db: float = MAX_BUDGET_DB

    def __post_init__(self):
        for name in ("base_qber_pct", "qber_loss_coeff", "skr_ref_bps", "noise_qber_coeff",
                     "ec_efficiency", "max_budget_db"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.skr_loss_exponent < 1.0:
            raise ValueError("skr_loss_exponent must be >= 1")

    def distillation_factor(self, qber_pct: float) -> float:
        return max(0.0, 1.0 - (1.0 + self.ec_efficiency) * binary_entropy(qber_pct / 100.0))

    @property
    def reference_factor(self) -> float:
        return self.distillation_factor(qber_estimate(self.ref_loss_db, 0.0, self))


def _inverse_transmittance(loss_db: float) -> float:
    if loss_db == math.inf:
        return math.inf
    return 10.0 ** (loss_db / 10.0)


def qber_estimate(route_loss_db: float, noise_rate: float, params: QkdDeviceParams) -> float:
    """QBER in percent, clamped to [0, 50]."""
    inv_t = _inverse_transmittance(route_loss_db)
    q = params.base_qber_pct + params.qber_loss_coeff * inv_t
    if noise_rate > 0:
        q += params.noise_qber_coeff * noise_rate * inv_t
    if math.isnan(q):
        return 50.0
    return min(50.0, max(0.0, q))


def skr_estimate(route_loss_db: float, qber_pct: float, params: QkdDeviceParams) -> float:
    if qber_pct >= params.qber_abort_threshold_pct:
        return 0.0
    if route_loss_db > params.max_budget_db or route_loss_db == math.inf:
        return 0.0
    norm = params.reference_factor
    if norm <= 0.0:
        return 0.0
    attenuation = 10.0 ** (-params.skr_loss_exponent * (route_loss_db - params.ref_loss_db) / 10.0)
    return params.skr_ref_bps * attenuation * params.distillation_factor(qber_pct) / norm


@dataclass(frozen=True)
class QkdLinkEstimate:
    qber_pct: float
    skr_bps: float
    signal_rate: float
    dark_rate: float
    noise_rate: float
    aborted: bool
    loss_db: float = 0.0
    noise: NoiseBreakdown = field(default_factory=NoiseBreakdown)


# --------------------------------------------------------------------------
# calibrated parameter bundle

@dataclass(frozen=True)
class CalibratedParams:
    device: QkdDeviceParams
    raman: RamanParams
    report: Mapping = field(default_factory=dict)
    ok: bool = True

    def to_json(self) -> str:
        doc = {
            "device": asdict(self.device),
            "raman": asdict(self.raman),
            "ok": self.ok,
            "report": self.report,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibratedParams":
        try:
            doc = json.loads(text)
            return cls(device=QkdDeviceParams(**doc["device"]), raman=RamanParams(**doc["raman"]),
                       report=doc.get("report", {}), ok=bool(doc.get("ok", True)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed parameter file: {exc!r}") from exc


def estimate_link(topology: Topology, route: Route, plan: ChannelPlan | None,
                  filter: FilterSpec, calibrated: CalibratedParams | None) -> QkdLinkEstimate:
    if calibrated is None:
        raise UncalibratedError("link estimation needs calibrated parameters")
    dev = calibrated.device
    loss = route_loss(topology, route)
    if plan is not None and plan.classical_channels:
        noise = noise_breakdown(plan, route, filter, calibrated.raman, topology)
    else:
        noise = NoiseBreakdown()
    qber = qber_estimate(loss, noise.total, dev)
    skr = skr_estimate(loss, qber, dev)
    transmittance = 10.0 ** (-loss / 10.0)
    signal = PULSE_RATE_HZ * MEAN_PHOTON_NUMBER * DETECTOR_EFFICIENCY * transmittance
    # dark term of the QBER model expressed back as a click rate (loss independent)
    dark = dev.qber_loss_coeff / 50.0 * PULSE_RATE_HZ * MEAN_PHOTON_NUMBER * DETECTOR_EFFICIENCY
    aborted = qber >= dev.qber_abort_threshold_pct or loss > dev.max_budget_db
    return QkdLinkEstimate(qber_pct=qber, skr_bps=skr, signal_rate=signal, dark_rate=dark,
                           noise_rate=noise.total, aborted=aborted, loss_db=loss, noise=noise)


def sample_observation(estimate: QkdLinkEstimate, rng: np.random.Generator,
                       sigma: float = 0.05,
                       threshold_pct: float = QBER_ABORT_THRESHOLD_PCT) -> tuple[float, float]:
    """One noisy device report; always consumes exactly two normal draws."""
    z = rng.standard_normal(2)
    qber = min(50.0, max(0.0, estimate.qber_pct * (1.0 + sigma * z[0])))
    if estimate.aborted:
        return max(qber, threshold_pct), 0.0
    skr = max(0.0, estimate.skr_bps * (1.0 + sigma * z[1]))
    if qber >= threshold_pct:
        skr = 0.0
    return qber, skr


# --------------------------------------------------------------------------
# calibration inputs

@dataclass(frozen=True)
class Table3Row:
    link: str
    length_km: float
    budget_db: float
    n_oxc: int
    qber_pct: float
    skr_bps: float

    @property
    def descriptor(self) -> RouteDescriptor:
        if self.link.upper() in ("B2B", "BACK-TO-BACK"):
            spans = ("loopback",)
        else:
            spans = tuple(s.strip() for s in self.link.split("+"))
        return RouteDescriptor(self.link, spans, self.n_oxc)


TABLE3_COLUMNS = ("link", "length_km", "budget_db", "n_oxc", "qber_pct", "skr_bps")


def load_table3_csv(text: str) -> list[Table3Row]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != TABLE3_COLUMNS:
        raise ParseError(f"expected columns {','.join(TABLE3_COLUMNS)}, got {reader.fieldnames}")
    rows = []
    try:
        for r in reader:
            rows.append(Table3Row(r["link"], float(r["length_km"]), float(r["budget_db"]),
                                  int(r["n_oxc"]), float(r["qber_pct"]), float(r["skr_bps"])))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad measurement row: {exc!r}") from exc
    return rows


@dataclass(frozen=True)
class Anchor:
    """A coexistence observation turned into a bound on the link QBER.

    kind is one of ``qber_min`` / ``qber_max`` (QBER at or above / strictly
    below ``value``), ``skr_min`` (SKR at least ``value`` and not aborted) or
    ``skr_ratio_min`` (SKR at least ``value`` times the no-coexistence SKR).
    """

    name: str
    route: str
    channels: tuple[float, ...]
    power_dbm: float
    kind: str
    value: float
    comb_bandwidth_ghz: float | None = None

    def plan(self, comb: Mapping | None = None) -> ChannelPlan:
        comb_filter = None
        if self.comb_bandwidth_ghz is not None:
            fspec = dict(comb or {})
            fspec["bandwidth_ghz"] = self.comb_bandwidth_ghz
            comb_filter = FilterSpec(**fspec)
        return ChannelPlan.uniform(self.channels, self.power_dbm, comb_filter=comb_filter)


@dataclass(frozen=True)
class AnchorSet:
    anchors: tuple[Anchor, ...]
    comb_filter: Mapping = field(default_factory=dict)


ANCHOR_KINDS = ("qber_min", "qber_max", "skr_min", "skr_ratio_min")


def load_anchors(text: str) -> AnchorSet:
    try:
        doc = json.loads(text)
        anchors = []
        for raw in doc["anchors"]:
            if raw["kind"] not in ANCHOR_KINDS:
                raise ValueError(f"unknown anchor kind {raw['kind']!r}")
            anchors.append(Anchor(
                name=str(raw.get("name", raw["route"])),
                route=str(raw["route"]),
                channels=tuple(float(f) for f in raw["channels"]),
                power_dbm=float(raw["power_dbm"]),
                kind=raw["kind"],
                value=float(raw["value"]),
                comb_bandwidth_ghz=None if raw.get("comb_bandwidth_ghz") is None
                else float(raw["comb_bandwidth_ghz"]),
            ))
        return AnchorSet(tuple(anchors), dict(doc.get("comb_filter", {})))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed anchor file: {exc!r}") from exc


@dataclass(frozen=True)
class CalibrationBounds:
    qber_max_abs_pp: float = 0.4
    skr_rms_rel: float = 0.25
    skr_max_rel: float = 0.40
    loss_max_abs_db: float = 0.3


# --------------------------------------------------------------------------
# fitting

def fit_qber_model(rows: Sequence[Table3Row]) -> tuple[float, float]:
    """Non-negative least squares for (intrinsic error, dark-count coefficient)."""
    x = np.array([10.0 ** (r.budget_db / 10.0) for r in rows])
    y = np.array([r.qber_pct for r in rows])
    sol, _ = nnls(np.column_stack([np.ones_like(x), x]), y)
    return float(sol[0]), float(sol[1])


def fit_skr_model(rows: Sequence[Table3Row], base: QkdDeviceParams) -> tuple[float, float]:
    """Least squares on log-SKR for (reference rate, loss exponent)."""
    norm = base.reference_factor
    ys, xs = [], []
    for r in rows:
        q = qber_estimate(r.budget_db, 0.0, base)
        factor = base.distillation_factor(q) / norm
        ys.append(math.log(r.skr_bps / factor))
        xs.append(-math.log(10.0) * (r.budget_db - base.ref_loss_db) / 10.0)
    a = np.column_stack([np.ones(len(xs)), xs])
    (log_r0, gamma), *_ = np.linalg.lstsq(a, np.array(ys), rcond=None)
    return float(math.exp(log_r0)), float(gamma)


def _qber_ceiling_for_skr(loss_db: float, skr_target: float, dev: QkdDeviceParams) -> float:
    """Largest QBER that still yields ``skr_target`` at ``loss_db``."""
    q0 = qber_estimate(loss_db, 0.0, dev)
    if skr_estimate(loss_db, q0, dev) < skr_target:
        raise CalibrationError(
            f"SKR {skr_target} bps unreachable at {loss_db:.2f} dB even without coexistence")
    hi = dev.qber_abort_threshold_pct * (1.0 - 1e-9)
    if skr_estimate(loss_db, hi, dev) >= skr_target:
        return hi
    return brentq(lambda q: skr_estimate(loss_db, q, dev) - skr_target, q0, hi, xtol=1e-10)


def _noise_response(anchor: Anchor, comb: Mapping, resolve_route, dev: QkdDeviceParams,
                    alpha_db_per_km: float, dispersion: float) -> tuple[float, np.ndarray]:
    """Base QBER and the QBER added per unit of (rho, fwm_coeff, skirt_coeff)."""
    topo, route = resolve_route(anchor.route)
    plan = anchor.plan(comb)
    loss = route_loss(topo, route)
    inv_t = 10.0 ** (loss / 10.0)
    cols = []
    for unit in (RamanParams(1.0, alpha_db_per_km, 0.0, 0.0, dispersion),
                 RamanParams(0.0, alpha_db_per_km, 1.0, 0.0, dispersion),
                 RamanParams(0.0, alpha_db_per_km, 0.0, 1.0, dispersion)):
        n = noise_breakdown(plan, route, BOB_FILTER, unit, topo).total
        cols.append(dev.noise_qber_coeff * n * inv_t)
    return qber_estimate(loss, 0.0, dev), np.array(cols)


def _anchor_bounds(anchor: Anchor, q0: float, loss: float, dev: QkdDeviceParams) -> tuple[float, float]:
    """(lower, upper) bound on the noise-induced QBER increment."""
    thr = dev.qber_abort_threshold_pct
    if anchor.kind == "qber_min":
        return max(anchor.value, 0.0) - q0, math.inf
    if anchor.kind == "qber_max":
        return -math.inf, anchor.value - q0
    if anchor.kind == "skr_min":
        return -math.inf, min(_qber_ceiling_for_skr(loss, anchor.value, dev), thr) - q0
    if anchor.kind == "skr_ratio_min":
        target = anchor.value * skr_estimate(loss, q0, dev)
        return -math.inf, _qber_ceiling_for_skr(loss, target, dev) - q0
    raise CalibrationError(f"unknown anchor kind {anchor.kind}")


def fit_coexistence(anchor_set: AnchorSet, dev: QkdDeviceParams, resolve_route,
                    alpha_db_per_km: float = 0.2,
                    dispersion_ps_nm_km: float = 17.0) -> tuple[RamanParams, float]:
    """Max-margin linear program over the leakage coefficients.

    Every anchor bounds the noise QBER increment, which is linear in the three
    coefficients. The program maximises the smallest relative slack; a
    non-positive optimum means the anchors cannot all hold.
    """
    rows_a, rows_b = [], []
    responses = []
    for anchor in anchor_set.anchors:
        topo, route = resolve_route(anchor.route)
        q0, resp = _noise_response(anchor, anchor_set.comb_filter, resolve_route, dev,
                                   alpha_db_per_km, dispersion_ps_nm_km)
        lo, hi = _anchor_bounds(anchor, q0, route_loss(topo, route), dev)
        if hi <= 0 or (math.isfinite(lo) and math.isfinite(hi) and lo >= hi):
            raise CalibrationError(f"anchor {anchor.name!r} is infeasible (bounds {lo:.3f}..{hi:.3f})")
        responses.append((resp, lo, hi))
    if not responses:
        raise CalibrationError("no coexistence anchors supplied")

    scale = np.array([max(r[0][i] for r in responses) for i in range(3)])
    scale[scale == 0] = 1.0
    for resp, lo, hi in responses:
        a = resp / scale
        if lo > 0 and math.isfinite(lo):
            rows_a.append(np.append(-a, lo))
            rows_b.append(-lo)
        if math.isfinite(hi):
            rows_a.append(np.append(a, hi))
            rows_b.append(hi)
    cost = np.zeros(4)
    cost[3] = -1.0
    bounds = [(0, None)] * 3 + [(-1.0, 1.0)]
    res = linprog(cost, A_ub=np.array(rows_a), b_ub=np.array(rows_b), bounds=bounds, method="highs")
    if res.status != 0 or res.x[3] <= 1e-6:
        raise CalibrationError("coexistence anchors are mutually inconsistent")
    coeffs = res.x[:3] / scale
    return RamanParams(rho=float(coeffs[0]), alpha_db_per_km=alpha_db_per_km,
                       fwm_coeff=float(coeffs[1]), skirt_coeff=float(coeffs[2]),
                       dispersion_ps_nm_km=dispersion_ps_nm_km), float(res.x[3])


def evaluate_anchor(anchor: Anchor, comb: Mapping, resolve_route,
                    calibrated: CalibratedParams) -> dict:
    topo, route = resolve_route(anchor.route)
    est = estimate_link(topo, route, anchor.plan(comb), BOB_FILTER, calibrated)
    if anchor.kind == "qber_min":
        passed = est.qber_pct >= anchor.value
    elif anchor.kind == "qber_max":
        passed = est.qber_pct < anchor.value
    elif anchor.kind == "skr_min":
        passed = est.skr_bps >= anchor.value and not est.aborted
    else:
        base = estimate_link(topo, route, None, BOB_FILTER, calibrated)
        passed = est.skr_bps >= anchor.value * base.skr_bps
    return {"name": anchor.name, "kind": anchor.kind, "value": anchor.value,
            "qber_pct": est.qber_pct, "skr_bps": est.skr_bps, "passed": bool(passed)}


def calibrate(table3_rows: Sequence[Table3Row], anchors: AnchorSet, resolve_route=None,
              bounds: CalibrationBounds = CalibrationBounds(),
              base: QkdDeviceParams | None = None) -> CalibratedParams:
    """Fit every free model coefficient; raise if any residual bound is broken."""
    if resolve_route is None:
        from .fixtures import resolve_route
    rows = list(table3_rows)
    if len(rows) < 4:
        raise CalibrationError("need at least 4 no-coexistence rows")
    if len(anchors.anchors) < 2:
        raise CalibrationError("need at least 2 coexistence anchors")
    base = base or QkdDeviceParams()
    ref = next((r for r in rows if r.descriptor.spans == ("loopback",)), min(rows, key=lambda r: r.budget_db))

    loss_fit: LossDecomposition | None
    try:
        loss_fit = fit_component_losses([(r.descriptor, r.budget_db) for r in rows])
    except Exception:
        loss_fit = None

    e, c = fit_qber_model(rows)
    dev = replace(base, base_qber_pct=e, qber_loss_coeff=c, ref_loss_db=ref.budget_db)
    r0, gamma = fit_skr_model(rows, dev)
    if gamma < 1.0:
        raise CalibrationError(f"fitted loss exponent {gamma:.3f} < 1")
    dev = replace(dev, skr_ref_bps=r0, skr_loss_exponent=gamma)

    qber_res = {r.link: qber_estimate(r.budget_db, 0.0, dev) - r.qber_pct for r in rows}
    skr_rel = {r.link: skr_estimate(r.budget_db, qber_estimate(r.budget_db, 0.0, dev), dev) / r.skr_bps - 1.0
               for r in rows}
    rms = math.sqrt(sum(v * v for v in skr_rel.values()) / len(skr_rel))

    raman, margin = fit_coexistence(anchors, dev, resolve_route)
    report = {
        "loss": None if loss_fit is None else {
            "terminal_total_db": loss_fit.terminal_total_db,
            "per_span_db": dict(loss_fit.per_span_db),
            "oxc_db": loss_fit.oxc_db,
            "residuals_db": dict(loss_fit.residuals_db),
        },
        "qber_residual_pp": qber_res,
        "skr_relative_error": skr_rel,
        "skr_rms_relative_error": rms,
        "anchor_margin": margin,
        "comb_filter": dict(anchors.comb_filter),
    }
    result = CalibratedParams(device=dev, raman=raman, report=report)
    report["anchors"] = [evaluate_anchor(a, anchors.comb_filter, resolve_route, result)
                         for a in anchors.anchors]

    failures = []
    if max(abs(v) for v in qber_res.values()) > bounds.qber_max_abs_pp:
        failures.append("QBER residual")
    if rms > bounds.skr_rms_rel or max(abs(v) for v in skr_rel.values()) > bounds.skr_max_rel:
        failures.append("SKR residual")
    if loss_fit is not None and loss_fit.max_abs_residual_db > bounds.loss_max_abs_db:
        failures.append("loss residual")
    if not all(a["passed"] for a in report["anchors"]):
        failures.append("anchor check")
    if failures:
        raise CalibrationError("calibration outside bounds: " + ", ".join(failures))
    return result

