"""How much classical launch power can share a fibre with the quantum channel?

Sweeps launch power for four classical channels on single- and two-span
routes and reports where the secret key rate first drops to zero.
"""

from dynqkd.fixtures import default_calibration
from dynqkd.presets import DEFAULT_BANDWIDTHS_GHZ, DEFAULT_POWERS_DBM, preset_filter_sweep, preset_power_sweep

params = default_calibration()

print("launch power sweep, 4 classical channels")
for link in ("L1", "L2", "L3", "L4", "L1+L2", "L1+L3"):
    res = preset_power_sweep(link, 4, DEFAULT_POWERS_DBM, params)
    zero = res.first_zero()
    at0 = res.at(0.0)
    print(f"  {link:<6} at 0 dBm: QBER {at0.qber_pct:5.2f} %, SKR {at0.skr_bps:6.0f} bps; "
          f"first zero at {zero if zero is not None else 'none'} dBm")

print()
print("comb filter bandwidth sweep on the field links")
for link in ("HPN-WTC", "NSQI-WTC"):
    res = preset_filter_sweep(link, DEFAULT_BANDWIDTHS_GHZ, params)
    ok = [p.value for p in res.points if p.skr_bps > 0]
    print(f"  {link:<9} key survives up to {max(ok) if ok else 'n/a'} GHz; "
          f"first zero at {res.first_zero()} GHz")
