"""
Per-iteration cost as the data grows
====================================

A SKI iteration multiplies by the ``n x m`` interpolation matrix twice, so
its cost grows with the number of data points. After the one-off
``W^T W`` accumulation, a GSGP iteration only touches ``m``-sized objects.
This sweep times both mean solves on the sine problem and writes tidy CSV
files that any plotting tool can read.
"""

import sys
from pathlib import Path

from gsgp.bench import SyntheticSpec, bench_mean_inference, emit_plot_data, gen_sine

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("scaling_out")
m = 256

reports = []
for n in (10_000, 30_000, 100_000, 300_000):
    X, y = gen_sine(SyntheticSpec(n=n, seed=0))
    (rep,) = bench_mean_inference(X, y, [m], trials=3, scenario=f"sine-n{n}")
    reports.append(rep)
    print(f"n={n:>7}  SKI {rep.ski_per_iter_us:8.1f} us/iter   GSGP {rep.gsgp_per_iter_us:6.1f} us/iter   "
          f"iters {rep.ski_iters}/{rep.gsgp_iters}   memory ratio {rep.mem_ratio:.3f}")

# GSGP pays once for W^T W; the preprocessing column shows that trade
for rep in reports:
    print(f"n={rep.n:>7}  preprocessing  SKI {rep.ski_prep_ms:7.1f} ms   GSGP {rep.gsgp_prep_ms:7.1f} ms")

files = emit_plot_data(reports, out)
print("wrote", ", ".join(str(p) for p in files))
