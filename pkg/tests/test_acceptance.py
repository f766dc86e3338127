"""Acceptance suite: one check per criterion, each reported as a PASS/FAIL line.

Run with pytest (lines appear in the terminal summary) or directly with
``python tests/test_acceptance.py``.
"""

import itertools
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from dynqkd import fixtures
from dynqkd import presets as P
from dynqkd.channel import BOB_FILTER, ChannelPlan, fwm_products
from dynqkd.controller import ConnState
from dynqkd.engine import load_scenario, run
from dynqkd.errors import InsufficientKeys
from dynqkd.kms import KeyStore, open_tunnel, tunnel_tick
from dynqkd.qkd import estimate_link, qber_estimate, skr_estimate
from dynqkd.topology import fit_component_losses, min_qkd_pairs

sys.path.insert(0, str(Path(__file__).parent))
from test_controller import check_fsm, run_random_sequence  # noqa: E402

RESULTS: dict[int, tuple[bool, str, str]] = {}


def record(number, title, ok, detail):
    RESULTS[number] = (bool(ok), title, detail)
    assert ok, f"criterion {number} ({title}) failed: {detail}"


@pytest.fixture(scope="module")
def cal():
    return fixtures.default_calibration()


def test_01_loss_decomposition():
    rows = fixtures.table3_rows()
    fit = fit_component_losses([(r.descriptor, r.budget_db) for r in rows])
    worst = fit.max_abs_residual_db
    hand = {r.link: r for r in rows}
    four = fit_component_losses([(hand[k].descriptor, hand[k].budget_db) for k in ("B2B", "L1", "L2", "L1+L2")])
    oracle_t = hand["L1"].budget_db + hand["L2"].budget_db - 1.0 - hand["L1+L2"].budget_db
    ok = (worst <= 0.3 and abs(four.terminal_total_db - oracle_t) < 1e-9
          and abs(four.terminal_total_db - 2.45) <= 0.05 and four.max_abs_residual_db <= 0.2)
    record(1, "loss decomposition", ok,
           f"12-row max |residual| {worst:.3f} dB (tol 0.3); 4-row terminal {four.terminal_total_db:.3f} dB "
           f"vs hand oracle {oracle_t:.3f}, residual {four.max_abs_residual_db:.3f} dB (tol 0.2)")


def test_02_qber_calibration(cal):
    rows = fixtures.table3_rows()
    errs = [abs(qber_estimate(r.budget_db, 0.0, cal.device) - r.qber_pct) for r in rows]
    record(2, "QBER calibration", max(errs) <= 0.4, f"max |error| {max(errs):.3f} pp over 12 rows (tol 0.4)")


def test_03_skr_calibration(cal):
    rows = sorted(fixtures.table3_rows(), key=lambda r: r.budget_db)
    pred = [skr_estimate(r.budget_db, qber_estimate(r.budget_db, 0.0, cal.device), cal.device) for r in rows]
    rel = [p / r.skr_bps - 1.0 for p, r in zip(pred, rows)]
    rms = math.sqrt(sum(e * e for e in rel) / len(rel))
    strict = all(b < a for a, b in zip(pred, pred[1:]))
    order_ok = True
    for (i, a), (j, b) in itertools.combinations(enumerate(rows), 2):
        if b.budget_db - a.budget_db >= 0.25:
            order_ok &= (pred[j] < pred[i]) == (b.skr_bps < a.skr_bps)
    ok = rms <= 0.25 and max(map(abs, rel)) <= 0.40 and strict and order_ok
    record(3, "SKR calibration", ok,
           f"RMS rel {rms:.3f} (tol 0.25), max rel {max(map(abs, rel)):.3f} (tol 0.40), "
           f"strictly decreasing {strict}, observed order kept {order_ok}")


def test_04_coexistence_anchors(cal):
    topo = fixtures.testbed_topology()
    est = lambda link, plan: estimate_link(topo, fixtures.table3_route(link), plan, BOB_FILTER, cal)
    base = est("L1", None).skr_bps
    a = max(abs(est("L1", ChannelPlan.testbed(1, p)).skr_bps / base - 1) for p in np.arange(-10, 1.01, 0.5))
    b = est("L4", ChannelPlan.testbed(1, 9.0))
    c = [est(l, ChannelPlan.testbed(4, 7.0)) for l in ("L1", "L2", "L3", "L4", "L5", "L6")]
    d = [est(l, ChannelPlan.testbed(4, 5.0)) for l in ("L1+L2", "L1+L3")]
    ok_a = a < 0.05
    ok_b = b.skr_bps >= 350 and not b.aborted
    ok_c = all(e.qber_pct >= 6 and e.skr_bps == 0 for e in c)
    ok_d = all(e.skr_bps == 0 for e in d)
    record(4, "coexistence anchors", ok_a and ok_b and ok_c and ok_d,
           f"(a) max SKR change {a:.3%} (<5%); (b) L4 9 dBm {b.skr_bps:.0f} bps; "
           f"(c) min QBER {min(e.qber_pct for e in c):.2f}%; (d) SKR {[e.skr_bps for e in d]}")


def test_05_field_filter_sweep(cal):
    bws = [float(b) for b in np.arange(500, 1001, 25)]
    hpn = P.preset_filter_sweep("HPN-WTC", bws, cal)
    nsqi = P.preset_filter_sweep("NSQI-WTC", bws, cal)
    low = [p for p in hpn.points if p.value <= 725]
    high = [p for p in hpn.points if p.value >= 750]
    ok_low = all(p.skr_bps >= 890 and p.qber_pct <= 2.8 for p in low)
    ok_high = all(p.skr_bps == 0 and p.qber_pct > 5.9 for p in high)
    ok_nsqi = all(b.skr_bps <= a.skr_bps for a, b in zip(hpn.points, nsqi.points))
    record(5, "field filter sweep", ok_low and ok_high and ok_nsqi,
           f"500-725 GHz min SKR {min(p.skr_bps for p in low):.0f} bps, max QBER {max(p.qber_pct for p in low):.2f}%; "
           f">=750 GHz max SKR {max(p.skr_bps for p in high):.0f}, min QBER {min(p.qber_pct for p in high):.2f}%; "
           f"NSQI <= HPN {ok_nsqi}")


def test_06_controller_fsm():
    topo = fixtures.testbed_topology()
    failures, exhausted = 0, 0
    for seed in range(1000):
        _, conn, sent = run_random_sequence(topo, seed, n_reports=4 + seed % 37)
        try:
            check_fsm(conn, sent)
        except AssertionError:
            failures += 1
        if conn.route is None:
            exhausted += 1
            failures += conn.state is not ConnState.FAILED
    record(6, "controller FSM properties", failures == 0 and exhausted > 0,
           f"1000 random report sequences, {failures} violations, {exhausted} ran out of routes")


def test_07_determinism(cal, tmp_path):
    root = resources.files("dynqkd").joinpath("data", "scenarios")
    same = True
    for name in ("reroute.json", "coexistence.json"):
        scen = load_scenario(str(root.joinpath(name)))
        same &= run(scen, cal).files() == run(scen, cal).files()
    for d in ("a", "b"):
        P.emit_report({"table3": P.preset_table3(cal), "fig5": P.fig5(cal)}, tmp_path / d)
    same &= all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
                for n in ("table3.csv", "fig5.csv", "summary.csv"))
    record(7, "determinism", same, "bundled scenarios and preset reports byte-identical across two runs")


def test_08_topology_scaling():
    ok = min_qkd_pairs(4, "static_full_mesh") == 6 and min_qkd_pairs(4, "switched") == 4
    for n in range(1, 11):
        ok &= min_qkd_pairs(n, "static_full_mesh") == n * (n - 1) // 2
        ok &= min_qkd_pairs(n, "switched") == n
    record(8, "topology scaling", ok, "N=4: 6 static vs 4 switched; N(N-1)/2 vs N for N=1..10")


def _tunnel_run(rate, rekey, horizon=3600, initial=0):
    store = KeyStore(("A", "B"))
    if initial:
        store.push_key_block(initial, 0.0)
    tunnel = open_tunnel(("x", "y"), 0.0, rekey)
    tunnel.next_rekey_at = 1.0
    for t in range(1, horizon + 1):
        store.push_key_block(rate, float(t))
        tunnel_tick(tunnel, store, float(t))
    return tunnel


def test_09_kms_accounting():
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(500):
        store, used = KeyStore(("A", "B")), {}
        for t in range(int(rng.integers(1, 60))):
            bits = int(rng.integers(1, 3000))
            if rng.random() < 0.5:
                store.push_key_block(bits, float(t))
            else:
                try:
                    m = store.reserve_key(bits, float(t))
                except InsufficientKeys:
                    pass
                else:
                    for key_id, start, n in m.pieces:
                        spans = used.setdefault(key_id, [])
                        violations += any(not (start + n <= a or b <= start) for a, b in spans)
                        spans.append((start, start + n))
            violations += store.buffer_bits != store.generated_bits - store.consumed_bits
            violations += store.buffer_bits != store.total_bits
    mismatches = 0
    for rate in (1, 4, 5, 100, 360, 500):
        for quarters in (2, 4, 40, 240, 480):
            rekey = quarters / 4
            k = np.arange(int((3600 - 1) // rekey) + 1)
            predicted = bool(np.any(rate * np.floor(1 + k * rekey) < 256 * (k + 1)))
            mismatches += (_tunnel_run(rate, rekey).starvations > 0) != predicted
    l6 = int(round(360.08))
    ok_l6 = _tunnel_run(l6, 1.0, initial=256).starvations == 0 and _tunnel_run(l6, 0.5, initial=256).starvations > 0
    record(9, "KMS accounting", violations == 0 and mismatches == 0 and ok_l6,
           f"500 random op sequences, {violations} accounting/double-reservation violations; "
           f"{mismatches} starvation mismatches vs closed form over 30 rate/rekey cases; "
           f"L6 360 bps sustains 256 bit/1 s but not 256 bit/0.5 s: {ok_l6}")


def _brute(freqs, q=193.20):
    out = {}
    for i, j, k in itertools.product(range(len(freqs)), repeat=3):
        f = round(freqs[i] * 1e6) + round(freqs[j] * 1e6) - round(freqs[k] * 1e6)
        out.setdefault(f, set())
        if i <= j:
            out[f].add((i, j, k))
    return {f: (tuple(sorted(v)), abs(f - round(q * 1e6)) <= 25_000) for f, v in out.items()}


def test_10_fwm_oracle():
    universe = [round(193.25 + 0.05 * n, 2) for n in range(11)]
    checked = mismatched = 0
    for size in range(2, 7):
        for subset in itertools.combinations(universe, size):
            got = {round(p.freq_thz * 1e6): (p.triples, p.collides) for p in fwm_products(subset)}
            checked += 1
            mismatched += got != _brute(list(subset))
    flag = [p for p in fwm_products([193.35, 193.50]) if round(p.freq_thz * 1e6) == 193_200_000]
    ok_flag = bool(flag) and flag[0].collides and abs(2 * 193.35 - 193.50 - 193.20) < 1e-9
    record(10, "FWM oracle", mismatched == 0 and ok_flag,
           f"{checked} channel sets of size 2-6 on the grid, {mismatched} mismatches; "
           f"2x193.35-193.50 = 193.20 THz flagged: {ok_flag}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
