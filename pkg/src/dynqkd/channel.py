"""Quantum/classical coexistence physics on a shared fibre route.

Noise photons reaching the Bob detector come from three places:

* spontaneous Raman scattering of every classical channel, flat across the
  receiver filter band (one calibrated coefficient ``rho``);
* four-wave-mixing tones that land on the quantum channel, added only when a
  product collides with it;
* broadband transmitter noise that leaks through the skirt of an optional
  band-pass on the classical comb (the field-trial tunable filter).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.constants import c as SPEED_OF_LIGHT
from scipy.constants import h as PLANCK

from .errors import UncalibratedError, ValidationError
from .topology import Route, Topology, route_loss

QUANTUM_FREQ_THZ = 193.20
QUANTUM_WAVELENGTH_NM = 1551.7
GRID_SPACING_GHZ = 50.0
GRID_ANCHOR_THZ = 193.10
TESTBED_FREQS_THZ = (193.35, 193.40, 193.45, 193.50)
FWM_COLLISION_WINDOW_GHZ = 25.0
RECEIVER_SENSITIVITY_DBM = -35.0

_MHZ_PER_THZ = 1_000_000


def _to_mhz(freq_thz: float) -> int:
    return int(round(freq_thz * _MHZ_PER_THZ))


def dbm_to_watts(power_dbm: float) -> float:
    if power_dbm == -math.inf:
        return 0.0
    return 10.0 ** ((power_dbm - 30.0) / 10.0)


def db_to_lin(db: float) -> float:
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class ClassicalChannel:
    freq_thz: float
    launch_power_dbm: float

    @property
    def power_w(self) -> float:
        return dbm_to_watts(self.launch_power_dbm)


@dataclass(frozen=True)
class FilterSpec:
    """Band-pass with a super-Gaussian edge; ``order`` 1 is a plain Gaussian.

    ``bandwidth_ghz`` is the full width at half maximum.
    """

    center_freq_thz: float
    bandwidth_ghz: float
    pass_loss_db: float = 0.5
    rejection_db: float = 40.0
    order: int = 1

    def __post_init__(self):
        if self.bandwidth_ghz <= 0:
            raise ValidationError(f"filter bandwidth must be > 0, got {self.bandwidth_ghz}")
        if self.rejection_db <= 0:
            raise ValidationError(f"filter rejection must be > 0, got {self.rejection_db}")

    def transfer(self, freq_thz: float) -> float:
        """Linear power transmission at ``freq_thz`` (pass loss excluded)."""
        offset_ghz = abs(freq_thz - self.center_freq_thz) * 1000.0
        x = 2.0 * offset_ghz / self.bandwidth_ghz
        shape = math.exp(-math.log(2.0) * x ** (2 * self.order))
        return max(shape, 10.0 ** (-self.rejection_db / 10.0))


# the 100 GHz filter inside the Bob unit
BOB_FILTER = FilterSpec(center_freq_thz=QUANTUM_FREQ_THZ, bandwidth_ghz=100.0, pass_loss_db=0.5)


@dataclass(frozen=True)
class ChannelPlan:
    classical_channels: tuple[ClassicalChannel, ...] = ()
    quantum_freq_thz: float = QUANTUM_FREQ_THZ
    grid_spacing_ghz: float = GRID_SPACING_GHZ
    comb_filter: FilterSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "classical_channels", tuple(self.classical_channels))
        freqs = [_to_mhz(ch.freq_thz) for ch in self.classical_channels] + [_to_mhz(self.quantum_freq_thz)]
        if len(set(freqs)) != len(freqs):
            raise ValidationError("channel frequencies must be distinct")
        step = int(round(self.grid_spacing_ghz * 1000))
        anchor = _to_mhz(GRID_ANCHOR_THZ)
        for ch in self.classical_channels:
            if (_to_mhz(ch.freq_thz) - anchor) % step:
                raise ValidationError(f"{ch.freq_thz} THz is off the {self.grid_spacing_ghz} GHz grid")

    @classmethod
    def uniform(cls, freqs_thz, power_dbm: float, **kwargs) -> "ChannelPlan":
        return cls(tuple(ClassicalChannel(f, power_dbm) for f in freqs_thz), **kwargs)

    @classmethod
    def testbed(cls, n_channels: int, power_dbm: float) -> "ChannelPlan":
        """The first ``n_channels`` of the testbed comb, nearest the quantum channel first."""
        return cls.uniform(TESTBED_FREQS_THZ[:n_channels], power_dbm)

    def with_power(self, power_dbm: float) -> "ChannelPlan":
        return replace(self, classical_channels=tuple(
            ClassicalChannel(ch.freq_thz, power_dbm) for ch in self.classical_channels))

    @property
    def freqs_thz(self) -> tuple[float, ...]:
        return tuple(ch.freq_thz for ch in self.classical_channels)

    def to_dict(self) -> dict:
        d = {
            "quantum_freq_thz": self.quantum_freq_thz,
            "grid_spacing_ghz": self.grid_spacing_ghz,
            "classical_channels": [{"freq_thz": ch.freq_thz, "launch_power_dbm": ch.launch_power_dbm}
                                   for ch in self.classical_channels],
        }
        if self.comb_filter is not None:
            f = self.comb_filter
            d["comb_filter"] = {"center_freq_thz": f.center_freq_thz, "bandwidth_ghz": f.bandwidth_ghz,
                                "pass_loss_db": f.pass_loss_db, "rejection_db": f.rejection_db,
                                "order": f.order}
        return d

    @classmethod
    def from_dict(cls, data) -> "ChannelPlan":
        comb = data.get("comb_filter")
        return cls(
            classical_channels=tuple(ClassicalChannel(float(c["freq_thz"]), float(c["launch_power_dbm"]))
                                     for c in data.get("classical_channels", [])),
            quantum_freq_thz=float(data.get("quantum_freq_thz", QUANTUM_FREQ_THZ)),
            grid_spacing_ghz=float(data.get("grid_spacing_ghz", GRID_SPACING_GHZ)),
            comb_filter=None if comb is None else FilterSpec(**comb),
        )


@dataclass(frozen=True)
class RamanParams:
    """Calibrated leakage coefficients.

    rho: Raman noise power per launch watt, per km of effective length, per
        GHz of receiver band (co- and counter-propagating lumped together).
    fwm_coeff: W^-2 km^-2, scales P_i P_j P_k times the phase-mismatched
        interaction length squared for colliding tones.
    skirt_coeff: fraction of classical launch power that is broadband noise
        at the quantum frequency before the comb filter.
    """

    rho: float | None = None
    alpha_db_per_km: float = 0.2
    fwm_coeff: float = 0.0
    skirt_coeff: float = 0.0
    dispersion_ps_nm_km: float = 17.0

    def __post_init__(self):
        for name in ("rho", "fwm_coeff", "skirt_coeff"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValidationError(f"{name} must be >= 0")

    @property
    def calibrated(self) -> bool:
        return self.rho is not None


def effective_length(alpha_db_per_km: float, length_km: float) -> float:
    if alpha_db_per_km < 0 or length_km < 0:
        raise ValueError("alpha and length must be non-negative")
    alpha = alpha_db_per_km * math.log(10.0) / 10.0
    if alpha == 0.0:
        return float(length_km)
    return -math.expm1(-alpha * length_km) / alpha


def fwm_interaction_length_sq(alpha_db_per_km: float, length_km: float,
                              mismatch_per_km: float) -> float:
    """Squared FWM interaction length of one span, in km^2.

    The coherent sum |(1 - exp((-alpha + i dbeta) L)) / (alpha - i dbeta)|^2
    with sin^2(dbeta L / 2) averaged over mismatches spread uniformly on
    [0, dbeta] (dispersion varies along deployed fibre). Reduces to L_eff^2
    when phase matched and saturates near 2 / dbeta^2 beyond the coherence
    length.
    """
    alpha = alpha_db_per_km * math.log(10.0) / 10.0
    decay = math.exp(-alpha * length_km)
    denom = alpha ** 2 + mismatch_per_km ** 2
    if denom == 0.0:
        return float(length_km) ** 2
    x = mismatch_per_km * length_km
    mean_sin_sq = 0.5 - math.sin(x) / (2.0 * x) if x > 1e-6 else x * x / 12.0
    num = (1.0 - decay) ** 2 + 4.0 * decay * mean_sin_sq
    return num / denom


def fwm_phase_mismatch_per_km(fi_thz: float, fj_thz: float, fk_thz: float,
                              dispersion_ps_nm_km: float, wavelength_nm: float) -> float:
    """Linear phase mismatch 2 pi lambda^2 D |fi - fk| |fj - fk| / c, in 1/km."""
    lam = wavelength_nm * 1e-9
    d_si = dispersion_ps_nm_km * 1e-6  # s/m^2
    dfi = abs(fi_thz - fk_thz) * 1e12
    dfj = abs(fj_thz - fk_thz) * 1e12
    return 2.0 * math.pi * lam ** 2 * d_si * dfi * dfj / SPEED_OF_LIGHT * 1e3


def photon_energy_j(wavelength_nm: float) -> float:
    if wavelength_nm <= 0:
        raise ValueError("wavelength must be positive")
    return PLANCK * SPEED_OF_LIGHT / (wavelength_nm * 1e-9)


def photon_rate_from_power(power_dbm: float, wavelength_nm: float) -> float:
    return dbm_to_watts(power_dbm) / photon_energy_j(wavelength_nm)


def quantum_wavelength_nm(plan: ChannelPlan) -> float:
    return SPEED_OF_LIGHT / (plan.quantum_freq_thz * 1e12) * 1e9


# --------------------------------------------------------------------------
# four-wave mixing

@dataclass(frozen=True)
class FwmProduct:
    freq_thz: float
    triples: tuple[tuple[int, int, int], ...]
    collides: bool


def fwm_products(freqs_thz, quantum_freq_thz: float = QUANTUM_FREQ_THZ,
                 window_ghz: float = FWM_COLLISION_WINDOW_GHZ) -> list[FwmProduct]:
    """Every f_i + f_j - f_k tone, merged by frequency.

    Triples are channel index tuples with i <= j (the two pumps commute); the
    trivial k in {i, j} cases are kept so a lone tone maps onto itself.
    """
    freqs = list(freqs_thz)
    if len(freqs) < 2:
        raise ValueError("need at least two frequencies")
    mhz = np.array([_to_mhz(f) for f in freqs], dtype=np.int64)
    grid = mhz[:, None, None] + mhz[None, :, None] - mhz[None, None, :]
    q = _to_mhz(quantum_freq_thz)
    window = int(round(window_ghz * 1000))
    out = []
    for value in np.unique(grid):
        idx = np.argwhere(grid == value)
        triples = tuple(sorted({(int(i), int(j), int(k)) for i, j, k in idx if i <= j}))
        out.append(FwmProduct(freq_thz=int(value) / _MHZ_PER_THZ, triples=triples,
                              collides=abs(int(value) - q) <= window))
    return out


def colliding_fwm_triples(plan: ChannelPlan) -> list[tuple[int, int, int]]:
    """Non-trivial mixing triples that land on the quantum channel."""
    if len(plan.classical_channels) < 2:
        return []
    hits = []
    for prod in fwm_products(plan.freqs_thz, plan.quantum_freq_thz):
        if prod.collides:
            hits.extend(t for t in prod.triples if t[2] not in (t[0], t[1]))
    return sorted(hits)


# --------------------------------------------------------------------------
# noise photon rates at the detector

@dataclass(frozen=True)
class NoiseBreakdown:
    raman: float = 0.0
    fwm: float = 0.0
    skirt: float = 0.0

    @property
    def total(self) -> float:
        return self.raman + self.fwm + self.skirt


def _span_geometry(topology: Topology, route: Route):
    """(length_km, upstream_loss_db, downstream_loss_db) per span.

    Upstream is measured from the first span input; downstream from the span
    output to the detector, including switch and receiver insertion.
    """
    rx = topology.node(route.nodes[-1]).rx_loss
    losses = [topology.span(s).loss_db for s in route.spans]
    # switches after each span: the node the span ends on
    oxc_after = [topology.node(n).oxc_loss_db for n in route.nodes[1:]]
    out = []
    upstream = 0.0
    for k, name in enumerate(route.spans):
        downstream = sum(losses[k + 1:]) + sum(oxc_after[k:]) + rx
        out.append((topology.span(name).length_km, upstream, downstream))
        upstream += losses[k] + oxc_after[k]
    return out


def _require(params: RamanParams):
    if not params.calibrated:
        raise UncalibratedError("Raman coefficient has not been calibrated")


def raman_noise_photon_rate(plan: ChannelPlan, route: Route, filter: FilterSpec,
                            params: RamanParams, topology: Topology) -> float:
    _require(params)
    if not plan.classical_channels:
        return 0.0
    launch_w = sum(ch.power_w for ch in plan.classical_channels)
    watts = 0.0
    for length, upstream, downstream in _span_geometry(topology, route):
        l_eff = effective_length(params.alpha_db_per_km, length)
        watts += (launch_w * 10 ** (-upstream / 10) * params.rho * l_eff
                  * filter.bandwidth_ghz * 10 ** (-downstream / 10))
    return watts / photon_energy_j(quantum_wavelength_nm(plan))


def fwm_noise_photon_rate(plan: ChannelPlan, route: Route, params: RamanParams,
                          topology: Topology) -> float:
    _require(params)
    triples = colliding_fwm_triples(plan)
    if not triples or params.fwm_coeff == 0.0:
        return 0.0
    chans = plan.classical_channels
    lam = quantum_wavelength_nm(plan)
    watts = 0.0
    for length, upstream, downstream in _span_geometry(topology, route):
        for i, j, k in triples:
            drive = (1.0 if i == j else 4.0) * chans[i].power_w * chans[j].power_w * chans[k].power_w
            dbeta = fwm_phase_mismatch_per_km(chans[i].freq_thz, chans[j].freq_thz, chans[k].freq_thz,
                                              params.dispersion_ps_nm_km, lam)
            l2 = fwm_interaction_length_sq(params.alpha_db_per_km, length, dbeta)
            watts += (params.fwm_coeff * drive * 10 ** (-3 * upstream / 10) * l2
                      * 10 ** (-downstream / 10))
    return watts / photon_energy_j(lam)


def skirt_noise_photon_rate(plan: ChannelPlan, route: Route, params: RamanParams,
                            topology: Topology) -> float:
    _require(params)
    if plan.comb_filter is None or not plan.classical_channels or params.skirt_coeff == 0.0:
        return 0.0
    launch_w = sum(ch.power_w for ch in plan.classical_channels)
    leak = plan.comb_filter.transfer(plan.quantum_freq_thz)
    # co-propagates with the quantum signal from the transmitter onwards
    src_tx = topology.node(route.nodes[0]).tx_loss
    path = route_loss(topology, route) - src_tx
    watts = params.skirt_coeff * launch_w * leak * 10 ** (-path / 10)
    return watts / photon_energy_j(quantum_wavelength_nm(plan))


def noise_breakdown(plan: ChannelPlan, route: Route, filter: FilterSpec,
                    params: RamanParams, topology: Topology) -> NoiseBreakdown:
    return NoiseBreakdown(
        raman=raman_noise_photon_rate(plan, route, filter, params, topology),
        fwm=fwm_noise_photon_rate(plan, route, params, topology),
        skirt=skirt_noise_photon_rate(plan, route, params, topology),
    )


# --------------------------------------------------------------------------
# classical receive power

@dataclass(frozen=True)
class ChannelFeasibility:
    freq_thz: float
    received_dbm: float
    feasible: bool


def classical_path_loss_db(topology: Topology, route: Route) -> float:
    """Net classical loss, transmitter to coherent receiver, after EDFA gain."""
    src = topology.node(route.nodes[0])
    dst = topology.node(route.nodes[-1])
    loss = src.classical_tx_loss_db + dst.classical_rx_loss_db - dst.edfa_gain_db
    loss += sum(topology.node(n).oxc_loss_db for n in route.nodes)
    loss += sum(topology.span(s).loss_db for s in route.spans)
    return loss


def received_power_dbm(launch_dbm: float, path_loss_db: float, edfa_gain_db: float = 0.0) -> float:
    return launch_dbm - path_loss_db + edfa_gain_db


def classical_feasibility(plan: ChannelPlan, route: Route, topology: Topology,
                          sensitivity_dbm: float = RECEIVER_SENSITIVITY_DBM) -> list[ChannelFeasibility]:
    loss = classical_path_loss_db(topology, route)
    out = []
    for ch in plan.classical_channels:
        rx = received_power_dbm(ch.launch_power_dbm, loss)
        out.append(ChannelFeasibility(ch.freq_thz, rx, rx >= sensitivity_dbm))
    return out

