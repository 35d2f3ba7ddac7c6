"""Synthetic data and timing/memory comparisons of the SKI and GSGP paths.

Per-iteration time is the solver loop time divided by its iteration count,
measured with a monotonic clock after one untimed warm-up solve. Memory is
the scalar count from :func:`gsgp.interp.memory_footprint`, not process RSS.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import ToeplitzOperator, fit_grid
from .interp import build_W, memory_footprint, stats_from_arrays
from .io import BinaryWriter
from .kernels import KernelSpec, preset
from .solvers import SkiOperator, cg, efcg_simplified
from . import gp

SCHEMA_VERSION = 1
Z95 = 1.959963984540054


@dataclass(frozen=True)
class SyntheticSpec:
    """Sine data on ``[0, 1]``: ``y = sin(4 pi x) + eps``, ``eps ~ N(0, noise_var)``."""

    n: int
    noise_var: float = 0.25
    m: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.noise_var < 0:
            raise ValueError("noise_var must be nonnegative")


def sine(x):
    return np.sin(4 * np.pi * x)


def gen_sine_chunks(spec: SyntheticSpec, chunk: int = 1 << 18):
    """Yield ``(X, y)`` blocks; their concatenation equals :func:`gen_sine`."""
    rx, re = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))
    sd = math.sqrt(spec.noise_var)
    left = spec.n
    while left:
        c = min(chunk, left)
        x = rx.random(c)
        y = sine(x) + sd * re.standard_normal(c)
        yield x[:, None], y
        left -= c


def gen_sine(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    Xs, ys = zip(*gen_sine_chunks(spec))
    return np.vstack(Xs), np.concatenate(ys)


def write_synthetic(path, spec: SyntheticSpec, fmt: str = "binary", chunk: int = 1 << 18) -> None:
    """Stream a synthetic dataset to disk without holding it in memory."""
    if fmt == "binary":
        with BinaryWriter(path, 2) as wr:
            for X, y in gen_sine_chunks(spec, chunk):
                wr.write(X, y)
    elif fmt == "csv":
        with open(path, "w") as fh:
            fh.write("x0,y\n")
            for X, y in gen_sine_chunks(spec, chunk):
                np.savetxt(fh, np.column_stack([X, y]), delimiter=",", fmt="%.17g")
    else:
        raise ValueError(f"unknown format {fmt!r}")


# -- reports -----------------------------------------------------------------

def mean_ci(values) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()) if v.size else float("nan"), float("nan")
    return float(v.mean()), float(Z95 * v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class BenchReport:
    scenario: str
    n: int
    m: int
    d: int
    scheme: str
    trials: int
    ski_per_iter_us: float = float("nan")
    ski_ci_us: float = float("nan")
    gsgp_per_iter_us: float = float("nan")
    gsgp_ci_us: float = float("nan")
    ski_prep_ms: float = float("nan")
    gsgp_prep_ms: float = float("nan")
    ski_mem: int = 0
    gsgp_mem: int = 0
    ski_iters: int = 0
    gsgp_iters: int = 0
    agreement: float = float("nan")
    error: str | None = None
    extra: dict = field(default_factory=dict)
    schema: int = SCHEMA_VERSION

    @property
    def time_ratio(self) -> float:
        return self.gsgp_per_iter_us / self.ski_per_iter_us

    @property
    def mem_ratio(self) -> float:
        return self.gsgp_mem / self.ski_mem

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self) -> list[dict]:
        """Tidy rows ``(n, m, path, per_iter_us, ci, prep_ms, mem_scalars, iters)``."""
        return [
            {"n": self.n, "m": self.m, "path": "ski", "per_iter_us": self.ski_per_iter_us,
             "ci": self.ski_ci_us, "prep_ms": self.ski_prep_ms, "mem_scalars": self.ski_mem,
             "iters": self.ski_iters},
            {"n": self.n, "m": self.m, "path": "gsgp", "per_iter_us": self.gsgp_per_iter_us,
             "ci": self.gsgp_ci_us, "prep_ms": self.gsgp_prep_ms, "mem_scalars": self.gsgp_mem,
             "iters": self.gsgp_iters},
        ]


REPORT_FIELDS = [f for f in BenchReport.__dataclass_fields__]
ROW_FIELDS = ["n", "m", "path", "per_iter_us", "ci", "prep_ms", "mem_scalars", "iters"]


def _timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


def bench_mean_inference(X, y, grid_sizes, trials: int = 3, tol: float = 0.01, scheme: str = "cubic",
                         spec: KernelSpec | None = None, scenario: str = "mean",
                         paths=("ski", "gsgp")) -> list[BenchReport]:
    """Posterior-mean solves by CG (SKI) and simplified EFCG (GSGP) for each grid size.

    Both solves start from ``x0 = y / s2``, the start simplified EFCG requires.

    A failing grid size is recorded in ``error`` and the sweep continues.
    """
    X = np.asarray(X, dtype=np.float64).reshape(len(y), -1)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    spec = preset("sine", d) if spec is None else spec
    if trials < 2:
        raise ValueError("need at least 2 trials for a confidence interval")
    reports = []
    for m in grid_sizes:
        rep = BenchReport(f"{scenario}-n{n}-m{m}", n, int(np.prod(np.broadcast_to(m, (d,)))), d, scheme,
                          trials)
        try:
            grid = fit_grid(X, m, scheme)
            kg = ToeplitzOperator(grid, spec)
            s2 = spec.noise_var
            if "ski" in paths:
                W, t = _timed(build_W, grid, X, scheme)
                rep.ski_prep_ms = 1e3 * t
                rep.ski_mem = memory_footprint(W, "SKI")
                op = SkiOperator(kg, W)
                # same start as the GSGP solve, so both walk the same Krylov sequence
                x0 = y / s2
                cg(op, y, x0=x0, tol=tol)
                times = []
                for _ in range(trials):
                    res = cg(op, y, x0=x0, tol=tol)
                    times.append(1e6 * res.per_iter_time)
                rep.ski_per_iter_us, rep.ski_ci_us = mean_ci(times)
                rep.ski_iters = res.iters
                coef_ski = kg.matvec(W.csr_t @ res.x)
            if "gsgp" in paths:
                stats, t = _timed(stats_from_arrays, grid, X, y, scheme)
                rep.gsgp_prep_ms = 1e3 * t
                rep.gsgp_mem = memory_footprint(stats, "GSGP")
                op = SkiOperator.from_stats(kg, stats)
                r0 = -kg.matvec(stats.wty) / s2
                efcg_simplified(op, r0, tol=tol, rhs_norm_sq=stats.yty)
                times = []
                for _ in range(trials):
                    res = efcg_simplified(op, r0, tol=tol, rhs_norm_sq=stats.yty)
                    times.append(1e6 * res.per_iter_time)
                rep.gsgp_per_iter_us, rep.gsgp_ci_us = mean_ci(times)
                rep.gsgp_iters = res.iters
                coef_gsgp = kg.matvec(res.wtx + stats.wty / s2)
            if "ski" in paths and "gsgp" in paths:
                rep.agreement = float(np.linalg.norm(coef_ski - coef_gsgp) / np.linalg.norm(coef_ski))
        except Exception as exc:  # recorded, not fatal to the sweep
            rep.error = f"{type(exc).__name__}: {exc}"
        reports.append(rep)
    return reports


def bench_loglik(X, y, m, probes: int = 30, tol: float = 0.01, trials: int = 2, scheme: str = "cubic",
                 spec: KernelSpec | None = None, seed: int = 0, solve_tol: float = 0.01) -> BenchReport:
    """Log-likelihood pipeline on both paths with identical Rademacher probes.

    Per-iteration fields hold the mean time per Lanczos step; total times and
    the two estimates go to ``extra``.
    """
    X = np.asarray(X, dtype=np.float64).reshape(len(y), -1)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    spec = preset("sine", d) if spec is None else spec
    rep = BenchReport(f"loglik-n{n}-m{m}-p{probes}-tol{tol:g}", n, int(np.prod(np.broadcast_to(m, (d,)))),
                      d, scheme, trials)
    try:
        grid = fit_grid(X, m, scheme)
        kg = ToeplitzOperator(grid, spec)
        W, t = _timed(build_W, grid, X, scheme)
        rep.ski_prep_ms = 1e3 * t
        rep.ski_mem = memory_footprint(W, "SKI")
        stats, t = _timed(stats_from_arrays, grid, X, y, scheme, probes, seed)
        rep.gsgp_prep_ms = 1e3 * t
        rep.gsgp_mem = memory_footprint(stats, "GSGP")
        ts, tg, ps, pg = [], [], [], []
        for _ in range(trials):
            ls, t1 = _timed(gp.log_likelihood_ski, W, y, kg, num_probes=probes, tol=tol, seed=seed,
                            solve_tol=solve_tol)
            lg, t2 = _timed(gp.log_likelihood_gsgp, stats, kg, num_probes=probes, tol=tol,
                            logdet="factorized", solve_tol=solve_tol)
            ts.append(t1)
            tg.append(t2)
            ps.append(1e6 * t1 / max(sum(ls.lanczos_iters), 1))
            pg.append(1e6 * t2 / max(sum(lg.lanczos_iters), 1))
        rep.ski_per_iter_us, rep.ski_ci_us = mean_ci(ps)
        rep.gsgp_per_iter_us, rep.gsgp_ci_us = mean_ci(pg)
        rep.ski_iters = int(sum(ls.lanczos_iters))
        rep.gsgp_iters = int(sum(lg.lanczos_iters))
        rep.agreement = abs(ls.loglik - lg.loglik) / abs(ls.loglik)
        rep.extra = {"probes": probes, "tol": tol, "ski_loglik": ls.loglik, "gsgp_loglik": lg.loglik,
                     "ski_total_s": mean_ci(ts)[0], "gsgp_total_s": mean_ci(tg)[0]}
    except Exception as exc:
        rep.error = f"{type(exc).__name__}: {exc}"
    return rep


def bench_tradeoff(X, y, Xtest, ytest, grid_sizes, tol: float = 0.01, scheme: str = "cubic",
                   spec: KernelSpec | None = None) -> list[dict]:
    """Error against runtime (preprocessing included) of posterior-mean inference per grid size.

    Error is the mean absolute test error normalised by the mean absolute
    observation.
    """
    X = np.asarray(X, dtype=np.float64).reshape(len(y), -1)
    Xtest = np.asarray(Xtest, dtype=np.float64).reshape(len(ytest), -1)
    spec = preset("sine", X.shape[1]) if spec is None else spec
    scale = float(np.mean(np.abs(ytest)))
    rows = []
    for m in grid_sizes:
        grid = fit_grid(np.vstack([X, Xtest]), m, scheme)
        kg = ToeplitzOperator(grid, spec)
        t0 = time.perf_counter()
        W = build_W(grid, X, scheme)
        mod = gp.posterior_mean_ski(W, y, kg, tol=tol)
        t_ski = time.perf_counter() - t0
        t0 = time.perf_counter()
        stats = stats_from_arrays(grid, X, y, scheme)
        mod_g = gp.posterior_mean_gsgp(stats, kg, tol=tol)
        t_gsgp = time.perf_counter() - t0
        for path, model, t in (("ski", mod, t_ski), ("gsgp", mod_g, t_gsgp)):
            err = float(np.mean(np.abs(model.predict_mean(Xtest) - ytest)) / scale)
            rows.append({"task": "mean", "path": path, "m": grid.m, "time_s": t, "error": err})
    return rows


def emit_plot_data(reports, path, loglik_reports=None, tradeoff_rows=None, fmt: str = "csv") -> list[Path]:
    """Write one tidy file per figure analog into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def dump(name, rows, fields):
        if fmt == "json":
            p = out / f"{name}.json"
            p.write_text(json.dumps({"schema": SCHEMA_VERSION, "rows": rows}, indent=1))
        else:
            p = out / f"{name}.csv"
            with open(p, "w", newline="") as fh:
                wr = csv.DictWriter(fh, fieldnames=fields)
                wr.writeheader()
                wr.writerows(rows)
        written.append(p)

    dump("fig3_periter", [r for rep in reports if rep.error is None for r in rep.rows()], ROW_FIELDS)
    if tradeoff_rows is not None:
        dump("fig4_tradeoff", list(tradeoff_rows), ["task", "path", "m", "time_s", "error"])
    if loglik_reports is not None:
        rows = []
        for rep in loglik_reports:
            if rep.error is not None:
                continue
            for path in ("ski", "gsgp"):
                rows.append({"n": rep.n, "m": rep.m, "path": path, "probes": rep.extra["probes"],
                             "tol": rep.extra["tol"], "runtime_s": rep.extra[f"{path}_total_s"],
                             "prep_ms": getattr(rep, f"{path}_prep_ms"),
                             "lanczos_iters": getattr(rep, f"{path}_iters"),
                             "loglik": rep.extra[f"{path}_loglik"]})
        dump("fig5_runtime", rows, ["n", "m", "path", "probes", "tol", "runtime_s", "prep_ms",
                                    "lanczos_iters", "loglik"])
    return written


def write_reports(reports, path, fmt: str = "json") -> None:
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps({"schema": SCHEMA_VERSION, "reports": [r.to_dict() for r in reports]},
                                   indent=1))
    else:
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
            wr.writeheader()
            for r in reports:
                wr.writerows(r.rows())
