"""Inject a QBER fault mid-session and watch the controller reroute.

The bundled scenario asks for a quantum connection N2 -> N1. At t = 2000 s
span L1 starts reporting 7 % QBER, above the abort threshold, so the
controller moves the session to the next candidate route.
"""

import tempfile
from importlib import resources

from dynqkd.engine import load_scenario, run

path = resources.files("dynqkd") / "data" / "scenarios" / "reroute.json"
with resources.as_file(path) as p:
    scenario = load_scenario(p)

result = run(scenario)
print("controller log")
for row in result.controller.log:
    q = "" if row.qber_pct is None else f"QBER {row.qber_pct:5.2f} %"
    print(f"  t={row.timestamp_s:8.1f}  {row.conn_id:<6} {row.event:<18} {row.route:<22} {q:<13} {row.action}")

print()
for row in result.summary:
    print(f"{row['conn_id']}: final {row['final_state']} on {row['route']} after {row['attempts']} attempt(s), "
          f"{row['tunnel_rekeys']} rekeys, {row['tunnel_starvations']} starvations")

with tempfile.TemporaryDirectory() as out:
    for f in result.write(out):
        print("wrote", f.name)
