"""Fit the link model to the bundled measurements and compare predictions.

Run with ``python demos/01_calibration.py``.
"""

from dynqkd.fixtures import default_anchors, table3_rows
from dynqkd.presets import preset_table3
from dynqkd.qkd import calibrate

params = calibrate(table3_rows(), default_anchors())
rep = params.report
print("fitted parameters")
print(params.to_json())
print()
print(f"anchor margin: {rep['anchor_margin']:.3f}")
print(f"SKR rms relative error: {rep['skr_rms_relative_error']:.3f}")
print()

measured = {r.link: r for r in table3_rows()}
print(f"{'link':<10}{'budget dB':>10}{'QBER %':>9}{'meas.':>8}{'SKR bps':>10}{'meas.':>8}")
for est in preset_table3(params):
    m = measured[est.link]
    print(f"{est.link:<10}{est.budget_db:>10.2f}{est.qber_pct:>9.2f}{m.qber_pct:>8.2f}"
          f"{est.skr_bps:>10.0f}{m.skr_bps:>8.0f}")
