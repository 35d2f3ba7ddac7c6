"""Command line interface: ``gsgp <subcommand> [options]``.

Exit codes: 0 success, 1 input error, 2 solver failure (non-convergence or
a non-SPD operator).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, gp, io
from .grid import Grid, ToeplitzOperator, fit_grid
from .interp import InterpolationError, build_W, sufficient_stats_chunks
from .kernels import KernelSpec, load_kernel_config, preset
from .solvers import SolverError

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--grid", type=_ints, default=[1024],
                   help="grid points per dimension, comma separated (one value is broadcast)")
    g.add_argument("--bounds", default=None,
                   help="grid bounds 'lo:hi,lo:hi,...'; default pads the data bounding box")
    g.add_argument("--kernel-preset", default="sine", help="named hyperparameter preset")
    g.add_argument("--hyper", default=None, help="JSON file with noise_std, lengthscales, outputscale")
    g.add_argument("--scheme", choices=["linear", "cubic"], default="cubic")
    g.add_argument("--tol", type=float, default=0.01, help="relative residual tolerance")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--trials", type=int, default=3)
    g.add_argument("--maxiter", type=int, default=1000)
    g.add_argument("--format", choices=["csv", "json"], default="json", help="output format")
    g.add_argument("--dim", "-d", type=int, default=1, help="input dimension of the data")
    return p


def _kernel(args, d: int) -> KernelSpec:
    if args.hyper:
        spec = load_kernel_config(args.hyper)
        if spec.dim != d:
            spec = KernelSpec(spec.hyper.with_dim(d), spec.family)
        return spec
    return preset(args.kernel_preset, d)


def _grid(args, path=None, d: int = 1) -> Grid:
    sizes = np.broadcast_to(np.asarray(args.grid), (d,))
    if args.bounds:
        pairs = [tuple(float(v) for v in b.split(":")) for b in args.bounds.split(",")]
        if len(pairs) == 1:
            pairs = pairs * d
        if len(pairs) != d:
            raise ValueError(f"--bounds has {len(pairs)} ranges, data has d={d}")
        return Grid(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs), tuple(int(s) for s in sizes))
    if path is None:
        raise ValueError("--bounds is required when no data file is given")
    # One streaming pass for the bounding box keeps memory independent of n.
    lo = np.full(d, np.inf)
    hi = np.full(d, -np.inf)
    for X, _ in io.iter_chunks(path, d):
        if len(X):
            lo = np.minimum(lo, X.min(axis=0))
            hi = np.maximum(hi, X.max(axis=0))
    if not np.all(np.isfinite(lo)):
        raise ValueError(f"{path}: no data rows")
    return fit_grid(np.vstack([lo, hi]), sizes, args.scheme)


def _emit(obj: dict, args, out=None):
    if args.format == "json":
        text = json.dumps(obj, indent=1)
    else:
        text = "\n".join(f"{k},{v}" for k, v in obj.items())
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _matrix_out(M, args, out=None):
    if args.format == "json":
        _emit({"matrix": np.asarray(M).tolist()}, args, out)
    else:
        target = out if out else sys.stdout
        np.savetxt(target, np.atleast_2d(M), delimiter=",", fmt="%.17g")


def _points(path, d: int) -> np.ndarray:
    """Test points: CSV with ``d`` columns (header optional)."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            toks = line.split(",")
            try:
                vals = [float(t) for t in toks]
            except ValueError:
                if lineno == 1:
                    continue
                raise io.DataFormatError(f"non-numeric value in {line.strip()!r}", lineno) from None
            if len(vals) < d:
                raise io.DataFormatError(f"expected {d} columns, found {len(vals)}", lineno)
            rows.append(vals[:d])
    return np.asarray(rows, dtype=np.float64).reshape(-1, d)


# -- subcommands -------------------------------------------------------------

def cmd_synth(args):
    spec = bench.SyntheticSpec(args.n, args.noise_var, args.grid[0], args.seed)
    bench.write_synthetic(args.out, spec, args.data_format)
    _emit({"written": str(args.out), "n": args.n, "noise_var": args.noise_var, "seed": args.seed}, args)


def _compute_stats(args, data, d):
    grid = _grid(args, data, d)
    return sufficient_stats_chunks(grid, args.scheme, io.iter_chunks(data, d, args.chunk_rows),
                                   args.probes, args.probe_seed)


def cmd_stats(args):
    stats = _compute_stats(args, args.data, args.dim)
    io.save_stats(args.out, stats)
    _emit({"written": str(args.out), "n": stats.n, "m": stats.m, "nnz_wtw": int(stats.wtw.nnz),
           "probes": stats.num_probes}, args)


def _load_or_compute_stats(args):
    if args.stats:
        return io.load_stats(args.stats)
    if not args.data:
        raise ValueError("give --stats or --data")
    return _compute_stats(args, args.data, args.dim)


def cmd_fit_mean(args):
    d = args.dim
    if args.path == "ski":
        if not args.data:
            raise ValueError("the SKI path needs --data")
        X, y = io.load_dataset(args.data, d)
        grid = _grid(args, args.data, d)
        kg = ToeplitzOperator(grid, _kernel(args, d))
        mu = float(y.mean()) if args.center else 0.0
        model = gp.posterior_mean_ski(build_W(grid, X, args.scheme), y, kg, tol=args.tol,
                                      maxiter=args.maxiter, mean_offset=mu)
    else:
        stats = _load_or_compute_stats(args)
        d = stats.grid.ndim
        mu = stats.sum_y / stats.n if args.center and stats.n else 0.0
        if mu:
            stats = stats.centered(mu)
        kg = ToeplitzOperator(stats.grid, _kernel(args, d))
        model = gp.posterior_mean_gsgp(stats, kg, tol=args.tol, maxiter=args.maxiter, mean_offset=mu)
    if args.out:
        gp.save_model(args.out, model)
    info = {"path": model.path, "iters": model.solve.iters, "m": model.m, "mean_offset": model.mean_offset}
    if args.out:
        info["model"] = str(args.out)
    if args.predict:
        P = _points(args.predict, d)
        mean = model.predict_mean(P)
        if args.format == "json":
            info["mean"] = mean.tolist()
        else:
            np.savetxt(sys.stdout, np.column_stack([P, mean]), delimiter=",", fmt="%.17g")
            return
    _emit(info, args)


def cmd_cov(args):
    model = gp.load_model(args.model)
    P = _points(args.points, model.grid.ndim)
    if args.method == "lowrank":
        if model.lowrank is None or model.lowrank.k != args.rank:
            gp.posterior_cov_lowrank(model, args.rank)
            if args.save_rank:
                gp.save_model(args.model, model)
        C = model.lowrank(P)
    else:
        C = gp.posterior_cov_exact(model, P, tol=min(args.tol, 1e-8))
    _matrix_out(C, args, args.out)


def cmd_loglik(args):
    stats = _load_or_compute_stats(args)
    kg = ToeplitzOperator(stats.grid, _kernel(args, stats.grid.ndim))
    probes = args.probes or (stats.num_probes if stats.probe_wtz is not None else 30)
    res = gp.log_likelihood_gsgp(stats, kg, num_probes=probes, tol=args.tol, seed=args.seed,
                                 logdet=args.logdet, solve_tol=args.solve_tol)
    text = res.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)


def _bench_scenario(n, args):
    X, y = bench.gen_sine(bench.SyntheticSpec(n, seed=args.seed))
    reports = bench.bench_mean_inference(X, y, args.grid, trials=args.trials, tol=args.tol,
                                         scheme=args.scheme)
    ll = []
    if args.loglik:
        ll.append(bench.bench_loglik(X, y, args.grid[0], probes=args.probes, tol=args.tol,
                                     trials=args.trials, scheme=args.scheme, seed=args.seed))
    return reports, ll


def cmd_bench(args):
    # scenarios run whole inside one worker, so timed regions never overlap
    # work from the same scenario
    if args.parallel:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor() as ex:
            results = list(ex.map(_bench_scenario, args.n, [args] * len(args.n)))
    else:
        results = [_bench_scenario(n, args) for n in args.n]
    reports = [r for rs, _ in results for r in rs]
    ll = [r for _, rs in results for r in rs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench.emit_plot_data(reports, out, loglik_reports=ll if args.loglik else None, fmt=args.format)
    bench.write_reports(reports + ll, out / f"reports.{args.format}", args.format)
    for r in reports + ll:
        status = r.error or "ok"
        print(f"{r.scenario}: ski {r.ski_per_iter_us:.1f}us/it gsgp {r.gsgp_per_iter_us:.1f}us/it "
              f"mem {r.ski_mem}/{r.gsgp_mem} [{status}]")


def cmd_exact(args):
    d = args.dim
    X, y = io.load_dataset(args.data, d)
    ref = gp.exact_gp_reference(X, y, _kernel(args, d))
    out = {"loglik": ref.loglik, "n": int(y.size)}
    if args.points:
        P = _points(args.points, d)
        out["mean"] = ref.mean(P).tolist()
        out["var"] = np.diag(ref.cov(P)).tolist()
    _emit(out, argparse.Namespace(format="json"))


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="gsgp", description="SKI / GSGP Gaussian-process inference")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic sine dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--noise-var", type=float, default=0.25)
    p.add_argument("--data-format", choices=["binary", "csv"], default="binary")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    def stats_opts(p, required):
        p.add_argument("--data", required=required, help="CSV or binary dataset")
        p.add_argument("--probes", type=int, default=0, help="record W^T z for this many Rademacher probes")
        p.add_argument("--probe-seed", type=int, default=0)
        p.add_argument("--chunk-rows", type=int, default=io.DEFAULT_CHUNK)

    p = sub.add_parser("stats", parents=[common], help="one streaming pass computing sufficient statistics")
    stats_opts(p, True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("fit-mean", parents=[common], help="fit the posterior mean")
    stats_opts(p, False)
    p.add_argument("--stats", default=None, help="precomputed statistics file")
    p.add_argument("--path", choices=["gsgp", "ski"], default="gsgp")
    p.add_argument("--center", action="store_true", help="subtract the mean of y before fitting")
    p.add_argument("--predict", default=None, help="CSV of test points")
    p.add_argument("--out", default=None, help="model file")
    p.set_defaults(func=cmd_fit_mean)

    p = sub.add_parser("cov", parents=[common], help="posterior covariance at test points")
    p.add_argument("--model", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--method", choices=["exact", "lowrank"], default="exact")
    p.add_argument("--rank", type=int, default=32)
    p.add_argument("--save-rank", action="store_true", help="store the rank-k factor in the model file")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_cov)

    p = sub.add_parser("loglik", parents=[common], help="log marginal likelihood")
    stats_opts(p, False)
    p.add_argument("--stats", default=None)
    p.add_argument("--logdet", choices=["auto", "factorized", "symmetric", "dense"], default="auto")
    p.add_argument("--solve-tol", type=float, default=1e-6)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_loglik)

    p = sub.add_parser("bench", parents=[common], help="timing and memory sweep on synthetic data")
    p.add_argument("--n", type=_ints, default=[10_000, 100_000])
    p.add_argument("--loglik", action="store_true")
    p.add_argument("--probes", type=int, default=30)
    p.add_argument("--out", default="bench_out")
    p.add_argument("--parallel", action="store_true", help="run scenarios in separate processes")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("exact", parents=[common], help="dense exact GP (reference, small n)")
    p.add_argument("--data", required=True)
    p.add_argument("--points", default=None)
    p.set_defaults(func=cmd_exact)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; here 2 is reserved for solver failures
        return EXIT_OK if not exc.code else EXIT_INPUT
    try:
        args.func(args)
    except SolverError as exc:
        print(f"gsgp: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (io.DataFormatError, InterpolationError, ValueError, KeyError, OSError) as exc:
        print(f"gsgp: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
