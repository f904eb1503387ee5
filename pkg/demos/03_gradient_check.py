"""Compare analytic gradients against central differences for each building block.

The full-model check takes about ten seconds; the blocks are much quicker.
"""

import time

from bridgenet.gradcheck import TOLERANCE, run_checks

t0 = time.perf_counter()
for r in run_checks(["ffn", "hdc", "tpp", "bfe", "tfr", "model"], seed=0):
    verdict = "ok" if r.passed else "FAIL"
    print(f"{r.block:6s} max rel error {r.max_rel_error:.2e} over {r.coords:5d} coords  {verdict}")
print(f"tolerance {TOLERANCE:g}, {time.perf_counter() - t0:.1f} s")
