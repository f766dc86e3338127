import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynqkd.channel import BOB_FILTER, ChannelPlan
from dynqkd.errors import CalibrationError, ParseError, UncalibratedError
from dynqkd.fixtures import default_anchors, resolve_route, table3_route
from dynqkd.qkd import (AnchorSet, CalibratedParams, QkdDeviceParams, Table3Row, binary_entropy, calibrate,
                        estimate_link, fit_qber_model, fit_skr_model, qber_estimate, sample_observation,
                        skr_estimate)


def test_entropy_edges():
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.11) == pytest.approx(-0.11 * math.log2(0.11) - 0.89 * math.log2(0.89))


def test_two_point_qber_oracle(rows):
    by = {r.link: r for r in rows}
    x1, x6 = 10 ** (by["L1"].budget_db / 10), 10 ** (by["L6"].budget_db / 10)
    c = (by["L6"].qber_pct - by["L1"].qber_pct) / (x6 - x1)
    e = by["L1"].qber_pct - c * x1
    assert c == pytest.approx(0.401, abs=1e-3)
    assert e == pytest.approx(-0.02, abs=0.01)
    e_fit, c_fit = fit_qber_model(rows)
    assert e_fit == 0.0  # clamped by the non-negative solve
    assert c_fit == pytest.approx(0.40, abs=0.05)


def test_qber_examples(calib):
    assert qber_estimate(4.99, 0.0, calib.device) == pytest.approx(1.02, abs=0.4)
    assert qber_estimate(9.61, 0.0, calib.device) == pytest.approx(3.65, abs=0.4)


def test_qber_intrinsic_limit():
    p = QkdDeviceParams(base_qber_pct=0.7, qber_loss_coeff=0.0)
    assert qber_estimate(0.0, 0.0, p) == 0.7


def test_qber_noise_saturates(calib):
    assert qber_estimate(5.0, 1e30, calib.device) == 50.0
    assert qber_estimate(5.0, math.inf, calib.device) == 50.0


def test_skr_examples(calib):
    assert skr_estimate(5.0, 6.5, calib.device) == 0.0
    assert skr_estimate(4.99, 1.02, calib.device) == pytest.approx(2575.69, rel=0.40)
    assert skr_estimate(math.inf, 1.0, calib.device) == 0.0


params_st = st.builds(
    QkdDeviceParams,
    base_qber_pct=st.floats(0, 1),
    qber_loss_coeff=st.floats(0.01, 1),
    skr_ref_bps=st.floats(10, 5000),
    skr_loss_exponent=st.floats(1, 3),
)


@settings(max_examples=200, deadline=None)
@given(p=params_st, loss=st.floats(0, 12), dl=st.floats(0, 3), noise=st.floats(0, 1e6), dn=st.floats(0, 1e6))
def test_monotonicity(p, loss, dl, noise, dn):
    q = qber_estimate(loss, noise, p)
    assert qber_estimate(loss + dl, noise, p) >= q
    assert qber_estimate(loss, noise + dn, p) >= q
    assert 0.0 <= q <= 50.0
    assert skr_estimate(loss + dl, q, p) <= skr_estimate(loss, q, p) + 1e-9
    assert skr_estimate(loss, q + 0.5, p) <= skr_estimate(loss, q, p) + 1e-9


@settings(max_examples=200, deadline=None)
@given(loss=st.floats(0, 10), q=st.floats(0, 50))
def test_hard_abort(calib, loss, q):
    skr = skr_estimate(loss, q, calib.device)
    if q >= 6.0:
        assert skr == 0.0
    else:
        assert skr > 0.0  # within the budget, a sub-threshold QBER always yields key


def test_round_trip_recovery():
    truth = QkdDeviceParams(base_qber_pct=0.3, qber_loss_coeff=0.35, ref_loss_db=4.0)
    truth = replace(truth, skr_ref_bps=2000.0, skr_loss_exponent=1.4)
    budgets = [4.0, 5.0, 6.0, 7.0, 8.0, 9.0]
    synth = []
    for b in budgets:
        q = qber_estimate(b, 0.0, truth)
        synth.append(Table3Row(f"r{b}", 0.0, b, 2, q, skr_estimate(b, q, truth)))
    e, c = fit_qber_model(synth)
    assert (e, c) == pytest.approx((0.3, 0.35), abs=1e-9)
    r0, gamma = fit_skr_model(synth, replace(truth, skr_ref_bps=0.0, skr_loss_exponent=1.0))
    assert (r0, gamma) == pytest.approx((2000.0, 1.4), rel=1e-9)


def test_calibration_report(calib):
    rep = calib.report
    assert max(abs(v) for v in rep["qber_residual_pp"].values()) <= 0.4
    assert rep["skr_rms_relative_error"] <= 0.25
    assert all(a["passed"] for a in rep["anchors"])
    assert calib.raman.rho > 0


def test_inconsistent_anchors_rejected(rows):
    base = default_anchors()
    swap = {"qber_min": "qber_max", "qber_max": "qber_min"}
    # zero key at 3 dBm while 5 dBm must still generate: impossible for a monotone model
    flip = [replace(a, kind=swap[a.kind]) if a.route == "L1+L2" else a for a in base.anchors]
    with pytest.raises(CalibrationError):
        calibrate(rows, AnchorSet(tuple(flip), base.comb_filter), resolve_route)


def test_calibrate_needs_enough_inputs(rows):
    with pytest.raises(CalibrationError):
        calibrate(rows[:3], default_anchors(), resolve_route)
    a = default_anchors()
    with pytest.raises(CalibrationError):
        calibrate(rows, AnchorSet(a.anchors[:1], a.comb_filter), resolve_route)


def test_params_json_round_trip(calib):
    again = CalibratedParams.from_json(calib.to_json())
    assert again.device == calib.device and again.raman == calib.raman
    with pytest.raises(ParseError):
        CalibratedParams.from_json("{}")


def test_estimate_needs_calibration(mesh):
    with pytest.raises(UncalibratedError):
        estimate_link(mesh, table3_route("L1"), None, BOB_FILTER, None)


def test_estimate_no_coexistence_matches_pipeline(mesh, calib):
    for link in ("B2B", "L1", "L6", "L1+L3"):
        topo, route = resolve_route(link)
        est = estimate_link(topo, route, ChannelPlan(), BOB_FILTER, calib)
        q = qber_estimate(est.loss_db, 0.0, calib.device)
        assert est.qber_pct == q
        assert est.skr_bps == skr_estimate(est.loss_db, q, calib.device)
        assert est.noise_rate == 0.0


def test_estimate_coexistence_examples(mesh, calib):
    l4 = estimate_link(mesh, table3_route("L4"), ChannelPlan.testbed(1, 9.0), BOB_FILTER, calib)
    assert l4.skr_bps >= 350 and not l4.aborted
    l1 = estimate_link(mesh, table3_route("L1"), ChannelPlan.testbed(4, 7.0), BOB_FILTER, calib)
    assert l1.aborted and l1.skr_bps == 0.0
    base = estimate_link(mesh, table3_route("L1"), None, BOB_FILTER, calib).skr_bps
    for p in (-5.0, 0.0, 1.0):
        one = estimate_link(mesh, table3_route("L1"), ChannelPlan.testbed(1, p), BOB_FILTER, calib)
        assert abs(one.skr_bps / base - 1.0) < 0.05


def test_sample_sigma_zero(mesh, calib):
    est = estimate_link(mesh, table3_route("L2"), None, BOB_FILTER, calib)
    assert sample_observation(est, np.random.default_rng(1), 0.0) == (est.qber_pct, est.skr_bps)


def test_sample_deterministic(mesh, calib):
    est = estimate_link(mesh, table3_route("L2"), None, BOB_FILTER, calib)
    a, b = np.random.default_rng(9), np.random.default_rng(9)
    assert [sample_observation(est, a) for _ in range(5)] == [sample_observation(est, b) for _ in range(5)]


def test_sample_mean(mesh, calib):
    est = estimate_link(mesh, table3_route("L2"), None, BOB_FILTER, calib)
    rng = np.random.default_rng(2024)
    samples = np.array([sample_observation(est, rng, 0.05) for _ in range(10_000)])
    assert samples[:, 0].mean() == pytest.approx(est.qber_pct, rel=0.01)
    assert samples[:, 1].mean() == pytest.approx(est.skr_bps, rel=0.01)


def test_sample_aborted(mesh, calib):
    est = estimate_link(mesh, table3_route("L1"), ChannelPlan.testbed(4, 8.0), BOB_FILTER, calib)
    rng = np.random.default_rng(0)
    for _ in range(50):
        q, s = sample_observation(est, rng)
        assert q >= 6.0 and s == 0.0
