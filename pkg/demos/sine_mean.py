"""
Posterior mean from sufficient statistics
=========================================

Fit a GP to noisy samples of a two-period sine wave without keeping the data
around: one pass accumulates ``W^T W`` and ``W^T y`` on a regular grid, and
the mean solve runs entirely on grid-sized vectors. The SKI solve over all
``n`` points and an exact GP on a subsample serve as cross-checks.
"""

import time

import numpy as np

from gsgp import (ToeplitzOperator, build_W, exact_gp_reference, fit_grid, preset, posterior_mean_gsgp,
                  posterior_mean_ski, stats_from_arrays)
from gsgp.bench import SyntheticSpec, gen_sine

# Draw the data: x uniform on [0, 1], y = sin(4 pi x) + N(0, 0.25)
X, y = gen_sine(SyntheticSpec(n=200_000, seed=0))
spec = preset("sine")
grid = fit_grid(X, (256,), "cubic")
kg = ToeplitzOperator(grid, spec)

# One pass over the data; after this X and y are no longer needed
t0 = time.perf_counter()
stats = stats_from_arrays(grid, X, y, "cubic")
print(f"statistics: n={stats.n}, m={stats.m}, nnz(W^T W)={stats.wtw.nnz}, "
      f"{time.perf_counter() - t0:.2f}s")

gsgp = posterior_mean_gsgp(stats, kg, tol=1e-8)
print(f"GSGP mean solve: {gsgp.solve.iters} iterations")

# The same posterior through the n x n SKI system
ski = posterior_mean_ski(build_W(grid, X, "cubic"), y, kg, tol=1e-8)
print(f"SKI mean solve:  {ski.solve.iters} iterations")

T = np.linspace(0.02, 0.98, 9)[:, None]
mg, ms = gsgp.predict_mean(T), ski.predict_mean(T)
print("max |GSGP - SKI| at test points:", float(np.max(np.abs(mg - ms))))

# Exact GP on a subsample of the same data, for scale
sub = np.random.default_rng(1).choice(len(y), 2000, replace=False)
exact = exact_gp_reference(X[sub], y[sub], spec)
me = exact.mean(T)

print("\n    x     truth    GSGP   exact(2k)")
for x, a, b in zip(T[:, 0], mg, me):
    print(f"{x:6.3f} {np.sin(4 * np.pi * x):8.3f} {a:7.3f} {b:8.3f}")
