"""Key buffer dynamics: when does a tunnel run out of key?

A store is filled at a fixed rate and drained by 256-bit rekeys. A rekey that
finds less than 256 bits is a starvation event.
"""

from dynqkd.errors import InsufficientKeys
from dynqkd.kms import KeyStore

BITS = 256


def simulate(rate_bps: float, rekey_s: float, horizon_s: float = 600.0, report_s: float = 1.0):
    store = KeyStore(("A1", "B1"))
    t, next_rekey = 0.0, rekey_s
    while t < horizon_s:
        t += report_s
        store.push_key_block(int(rate_bps * report_s), t)
        while next_rekey <= t:
            try:
                store.reserve_key(BITS, next_rekey)
            except InsufficientKeys:
                store.record_starvation(next_rekey, BITS)
            next_rekey += rekey_s
    return store.stats(t, window_s=horizon_s)


print(f"{'rate bps':>9}{'rekey s':>9}{'starved':>9}{'buffer bits':>13}")
for rate in (128, 256, 360, 1024):
    for rekey in (0.5, 1.0, 2.0):
        s = simulate(rate, rekey)
        print(f"{rate:>9}{rekey:>9}{s.starvation_events:>9}{s.buffer_bits:>13}")
