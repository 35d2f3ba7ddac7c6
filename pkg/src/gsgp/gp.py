"""GP inference on top of the SKI / GSGP solvers.

Two fitting paths produce the same :class:`PosteriorModel`:

* SKI: solve ``(W K_G W^T + s2 I) zt = y`` with CG on ``n``-vectors and cache
  ``K_G W^T zt``;
* GSGP: from sufficient statistics only, ``zbar = (K_G W^T W + s2 I)^{-1} K_G W^T y``.

Both caches are the same ``m``-vector, so a mean query at ``x`` is ``w_x^T``
times it. Dense reference implementations of both forms and of the exact GP
live here too; they are the oracles for the tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .grid import Grid, ToeplitzOperator
from .interp import InterpMatrix, Scheme, SufficientStats, build_W, rademacher
from .kernels import KernelSpec, kernel_matrix
from .solvers import (DEFAULT_MAXITER, DEFAULT_TOL, ConvergenceError, NotSPDError, SkiOperator,
                      SolveResult, cg, efcg_simplified, efla, lanczos, quadrature_stop,
                      symmetric_gsgp_solve)

EXACT_CAP = 4096
LOG_2PI = math.log(2 * math.pi)
DENSE_LOGDET_CAP = 8192


def _noise(kg_op: ToeplitzOperator, noise_var):
    return kg_op.noise_var if noise_var is None else float(noise_var)


def _check(res: SolveResult, what: str) -> SolveResult:
    if not res.converged:
        raise ConvergenceError(
            f"{what}: no convergence after {res.iters} iterations "
            f"(r^T r = {res.residual_sq:.3e}, target {res.eps:.3e})",
            res.residual_sq, res.iters,
        )
    return res


def stats_from_W(W: InterpMatrix, y, grid: Grid) -> SufficientStats:
    y = np.asarray(y, dtype=np.float64)
    return SufficientStats(grid, W.scheme, W.gram(), W.csr_t @ y, float(y @ y), W.n, float(y.sum()))


# -- fitted model ------------------------------------------------------------

@dataclass
class LowRankCovariance:
    """``cov(x, x') ~ w_x^T K_G w_x' - (R^T w_x)^T (R^T w_x')`` with ``R`` of shape (m, k)."""

    model: "PosteriorModel"
    R: np.ndarray

    @property
    def k(self) -> int:
        return self.R.shape[1]

    def __call__(self, X, X2=None) -> np.ndarray:
        model = self.model
        Wa = model.weights(X)
        Wb = Wa if X2 is None else model.weights(X2)
        prior = (Wa @ model.kg_op.matvec(Wb.T.toarray())) if Wb.shape[0] else np.zeros((Wa.shape[0], 0))
        Ra = Wa @ self.R
        Rb = Ra if X2 is None else Wb @ self.R
        return np.asarray(prior - Ra @ Rb.T)


@dataclass
class PosteriorModel:
    """A fitted posterior; predictions touch only the sparse weights and ``m``-vectors."""

    grid: Grid
    spec: KernelSpec
    noise_var: float
    scheme: Scheme
    kg_op: ToeplitzOperator
    stats: SufficientStats
    coef: np.ndarray
    path: str
    mean_offset: float = 0.0
    solve: SolveResult | None = None
    lowrank: LowRankCovariance | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return self.grid.m

    def weights(self, X) -> sp.csr_matrix:
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.grid.ndim)
        return build_W(self.grid, X, self.scheme).csr

    def operator(self) -> SkiOperator:
        return SkiOperator.from_stats(self.kg_op, self.stats, self.noise_var)

    def predict_mean(self, X) -> np.ndarray:
        return self.weights(X) @ self.coef + self.mean_offset

    def predict_cov(self, X, method: str = "exact", **kw) -> np.ndarray:
        if method == "exact":
            return posterior_cov_exact(self, X, **kw)
        if method == "lowrank":
            if self.lowrank is None:
                posterior_cov_lowrank(self, **kw)
            return self.lowrank(X)
        raise ValueError(f"unknown covariance method {method!r}")

    def loglik(self, **kw) -> "LoglikResult":
        return log_likelihood_gsgp(self.stats, self.kg_op, self.noise_var, **kw)


def posterior_mean_gsgp(stats: SufficientStats, kg_op: ToeplitzOperator, noise_var: float | None = None,
                        tol: float = DEFAULT_TOL, maxiter: int = DEFAULT_MAXITER,
                        method: str = "efcg", mean_offset: float = 0.0) -> PosteriorModel:
    """GSGP posterior mean from sufficient statistics alone.

    ``method="efcg"`` runs the simplified EFCG started at ``x0 = y / s2``
    (so the initial residual lies in the range of ``W``); ``"symmetric"``
    solves via ``K_G (K_G W^T W K_G + s2 K_G)^{-1}``.
    """
    s2 = _noise(kg_op, noise_var)
    op = SkiOperator.from_stats(kg_op, stats, s2)
    if method == "efcg":
        r0 = -op.kg(stats.wty) / s2
        res = _check(efcg_simplified(op, r0, tol=tol, rhs_norm_sq=stats.yty, maxiter=maxiter),
                     "GSGP mean solve")
        wtz = res.wtx + stats.wty / s2
        coef = op.kg(wtz)
    elif method == "symmetric":
        res = _check(symmetric_gsgp_solve(op, op.kg(stats.wty), tol=tol, maxiter=maxiter),
                     "symmetric GSGP mean solve")
        coef = res.x
    else:
        raise ValueError(f"unknown method {method!r}")
    return PosteriorModel(stats.grid, kg_op.spec, s2, stats.scheme, kg_op, stats, coef, "gsgp",
                          mean_offset, res)


def posterior_mean_ski(W: InterpMatrix, y, kg_op: ToeplitzOperator, noise_var: float | None = None,
                       tol: float = DEFAULT_TOL, maxiter: int = DEFAULT_MAXITER,
                       mean_offset: float = 0.0) -> PosteriorModel:
    """SKI posterior mean: CG on the ``n x n`` system, then cache ``K_G W^T zt``."""
    s2 = _noise(kg_op, noise_var)
    y = np.asarray(y, dtype=np.float64) - mean_offset
    op = SkiOperator(kg_op, W, noise_var=s2)
    res = _check(cg(op, y, tol=tol, maxiter=maxiter), "SKI mean solve")
    coef = kg_op.matvec(W.csr_t @ res.x)
    stats = stats_from_W(W, y, kg_op.grid)
    return PosteriorModel(kg_op.grid, kg_op.spec, s2, W.scheme, kg_op, stats, coef, "ski", mean_offset, res)


def posterior_cov_exact(model: PosteriorModel, X, tol: float = 1e-10, maxiter: int = DEFAULT_MAXITER,
                        return_info: bool = False):
    """Posterior covariance at the test points, one compressed solve per point.

    For test weights ``w`` the solve starts from ``x0 = 0`` with
    ``b = W K_G w``; its output ``xd = W^T (K + s2 I)^{-1} W K_G w`` gives
    ``C w = K_G (w - xd)``. The result is symmetrised.
    """
    Wt = model.weights(X)
    op = model.operator()
    kw = op.kg(Wt.T.toarray()) if Wt.shape[0] else np.zeros((model.m, 0))
    post = np.empty_like(kw)
    iters = []
    for j in range(kw.shape[1]):
        res = _check(efcg_simplified(op, kw[:, j], tol=tol, maxiter=maxiter), "covariance solve")
        post[:, j] = kw[:, j] - op.kg(res.wtx)
        iters.append(res.iters)
    C = np.asarray(Wt @ post)
    asym = float(np.max(np.abs(C - C.T))) if C.size else 0.0
    C = 0.5 * (C + C.T)
    if return_info:
        return C, {"max_asymmetry": asym, "iters": iters}
    return C


def posterior_cov_lowrank(model: PosteriorModel, k: int, reorth: int = 2) -> LowRankCovariance:
    """Rank-``k`` covariance surrogate from factorized Lanczos.

    Lanczos runs on the SKI operator from ``b = 1_n = W 1_m``, needing only
    ``W^T b = W^T W 1`` and ``b^T b = n``. With ``Q = W Qhat + b d^T / ||b||``
    and ``T = L L^T``, ``(K + s2 I)^{-1}`` is replaced by ``Q T^{-1} Q^T``, so
    ``R = K_G W^T Q L^{-T}``.
    """
    m = model.m
    k = int(k)
    if k < 0 or k > m:
        raise ValueError(f"rank must be in [0, {m}], got {k}")
    if k == 0 or model.stats.n == 0:
        R = np.zeros((m, 0))
    else:
        op = model.operator()
        fac = efla(op, k=k, wtb=model.stats.wt1, b_sq=float(model.stats.n), reorth=reorth)
        h = model.stats.wt1 / fac.b_norm
        WtQ = fac.Phat + np.outer(h, fac.d)
        L = np.linalg.cholesky(fac.T())
        R = scipy.linalg.solve_triangular(L, op.kg(WtQ).T, lower=True).T
    model.lowrank = LowRankCovariance(model, R)
    return model.lowrank


# -- log-determinants and likelihood ----------------------------------------

def _quadrature_logdet(alpha, beta, z_sq: float, scale: float) -> float:
    alpha = np.asarray(alpha)
    if alpha.size == 1:
        theta, S = alpha.copy(), np.ones((1, 1))
    else:
        theta, S = scipy.linalg.eigh_tridiagonal(alpha, np.asarray(beta))
    if theta.min() < -1e-10 * scale:
        raise NotSPDError(f"negative Ritz value {theta.min():.3e}: operator is not SPD")
    theta = np.maximum(theta, np.finfo(float).tiny)
    return float(z_sq * np.sum(S[0] ** 2 * np.log(theta)))


def _slq_from_factors(factors, dim_scale) -> tuple[float, list[int]]:
    vals, ks = [], []
    for fac, z_sq in factors:
        scale = max(np.max(np.abs(fac.alpha)), 1e-300)
        vals.append(_quadrature_logdet(fac.alpha, fac.beta, z_sq, scale))
        ks.append(fac.k)
    return float(np.mean(vals)) * dim_scale, ks


def _excess_log(s2: float) -> Callable:
    # the SKI operator is s2 I plus a rank-m term, so every probe value carries
    # n log s2 exactly; judging convergence on log(t / s2) keeps the stop rule
    # from being swamped by that known floor
    return lambda t: np.log(np.maximum(t, np.finfo(float).tiny) / s2)


def probe_streams(seed: int, num_probes: int) -> list[np.random.Generator]:
    """Independent per-probe generators split from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(num_probes)]


def slq_logdet(operator, dim: int, num_probes: int = 30, k: int | None = None, tol: float = 0.01,
               seed: int = 0, return_info: bool = False):
    """Stochastic Lanczos quadrature estimate of ``logdet(A)`` for SPD ``A``.

    Each Rademacher probe ``z`` contributes ``||z||^2 e1^T log(T) e1`` from
    Lanczos started at ``z``; the estimate is their mean. Lanczos runs to
    depth ``k`` if given, otherwise until successive quadrature values change
    by less than ``tol`` (relative). For a :class:`SkiOperator` the change is
    measured on ``log(theta / s2)``, since ``s2`` bounds its spectrum below.
    """
    if num_probes < 1:
        raise ValueError("need at least one probe")
    f = _excess_log(operator.noise_var) if isinstance(operator, SkiOperator) else np.log
    factors = []
    for rng in probe_streams(seed, num_probes):
        z = rademacher(rng, dim)
        kk = dim if k is None else min(k, dim)
        stop = None if k is not None else quadrature_stop(tol, f)
        factors.append((lanczos(operator, z, kk, stop=stop), float(z @ z)))
    est, ks = _slq_from_factors(factors, 1.0)
    return (est, {"lanczos_iters": ks}) if return_info else est


def slq_logdet_ski_factorized(op: SkiOperator, probe_wtz, n: int, k: int | None = None, tol: float = 0.01,
                              num_probes: int | None = None):
    """``logdet(W K_G W^T + s2 I_n)`` by SLQ with factorized Lanczos.

    Only the probe images ``W^T z_j`` (recorded during the statistics pass)
    are needed; every Rademacher probe has ``||z||^2 = n``.
    """
    P = probe_wtz.shape[1] if num_probes is None else min(num_probes, probe_wtz.shape[1])
    factors = []
    for j in range(P):
        stop = None if k is not None else quadrature_stop(tol, _excess_log(op.noise_var))
        kk = op.m + 1 if k is None else k
        factors.append((efla(op, k=kk, wtb=probe_wtz[:, j], b_sq=float(n), stop=stop), float(n)))
    return _slq_from_factors(factors, 1.0)


@dataclass
class LoglikResult:
    """``loglik = -(logdet + quad + const) / 2`` with ``const = n log 2pi + (n - m) log s2``.

    ``logdet`` is ``logdet(K_G W^T W + s2 I_m)``.
    """

    loglik: float
    logdet: float
    quad: float
    const: float
    n: int
    m: int
    num_probes: int = 0
    solver_iters: int = 0
    lanczos_iters: list = field(default_factory=list)
    route: str = ""

    @classmethod
    def build(cls, logdet: float, quad: float, n: int, m: int, noise_var: float, **kw) -> "LoglikResult":
        const = n * LOG_2PI + (n - m) * math.log(noise_var)
        return cls(-0.5 * (logdet + quad + const), logdet, quad, const, n, m, **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "LoglikResult":
        return cls(**json.loads(text))


def gsgp_logdet_dense(wtw, KG: np.ndarray, noise_var: float) -> float:
    """``logdet(K_G W^T W + s2 I)`` as ``logdet(s2 I + C K_G C^T)`` with ``C^T C = W^T W``.

    The symmetric form allows a Cholesky factorisation.
    """
    wtw = wtw.toarray() if sp.issparse(wtw) else np.asarray(wtw)
    lam, V = np.linalg.eigh(wtw)
    C = np.sqrt(np.clip(lam, 0, None))[:, None] * V.T
    M = C @ KG @ C.T
    M = 0.5 * (M + M.T) + noise_var * np.eye(M.shape[0])
    L = np.linalg.cholesky(M)
    return float(2 * np.sum(np.log(np.diag(L))))


def log_likelihood_gsgp(stats: SufficientStats, kg_op: ToeplitzOperator, noise_var: float | None = None,
                        num_probes: int = 30, tol: float = 0.01, seed: int | None = None,
                        logdet: str = "auto", k: int | None = None, solve_tol: float = 1e-6,
                        maxiter: int = DEFAULT_MAXITER) -> LoglikResult:
    """GSGP log marginal likelihood from sufficient statistics.

    The quadratic term is ``(y^T y - (W^T y)^T zbar) / s2``. The log-determinant
    route is one of

    ``"factorized"``
        SLQ with factorized Lanczos on the SKI operator using the probe images
        stored in ``stats``, then ``- (n - m) log s2``;
    ``"symmetric"``
        SLQ on ``K_G W^T W K_G + s2 K_G`` minus SLQ on ``K_G`` (needs a well
        conditioned ``K_G``);
    ``"dense"``
        exact, for small ``m``;
    ``"auto"``
        factorized when probe images are present, else symmetric.
    """
    s2 = _noise(kg_op, noise_var)
    n, m = stats.n, stats.m
    if num_probes < 1 and logdet != "dense":
        raise ValueError("need at least one probe for a stochastic log-determinant")
    model = posterior_mean_gsgp(stats, kg_op, s2, tol=solve_tol, maxiter=maxiter)
    quad = (stats.yty - float(stats.wty @ model.coef)) / s2
    route = logdet
    if route == "auto":
        route = "factorized" if stats.probe_wtz is not None else "symmetric"
    op = model.operator()
    ks: list[int] = []
    P = 0
    if route == "factorized":
        if stats.probe_wtz is None:
            raise ValueError("statistics carry no probe images; recompute with num_probes > 0")
        P = min(num_probes, stats.num_probes)
        ld_ski, ks = slq_logdet_ski_factorized(op, stats.probe_wtz, n, k=k, tol=tol, num_probes=P)
        ld = ld_ski - (n - m) * math.log(s2)
    elif route == "symmetric":
        P = num_probes
        seed = 0 if seed is None else seed

        def sym(v):
            kv = op.kg(v)
            return op.kg(op.wtw_mv(kv)) + s2 * kv

        a, ia = slq_logdet(sym, m, num_probes, k=k, tol=tol, seed=seed, return_info=True)
        b, ib = slq_logdet(kg_op.matvec, m, num_probes, k=k, tol=tol, seed=seed, return_info=True)
        ld = a - b
        ks = ia["lanczos_iters"] + ib["lanczos_iters"]
    elif route == "dense":
        KG = np.column_stack([kg_op.column(j) for j in range(m)]) if m <= DENSE_LOGDET_CAP else None
        if KG is None:
            raise ValueError(f"dense log-determinant refused for m={m} > {DENSE_LOGDET_CAP}")
        ld = gsgp_logdet_dense(stats.wtw, KG, s2)
    else:
        raise ValueError(f"unknown logdet route {logdet!r}")
    return LoglikResult.build(ld, quad, n, m, s2, num_probes=P, solver_iters=model.solve.iters,
                              lanczos_iters=ks, route=route)


def log_likelihood_ski(W: InterpMatrix, y, kg_op: ToeplitzOperator, noise_var: float | None = None,
                       num_probes: int = 30, tol: float = 0.01, seed: int = 0, k: int | None = None,
                       solve_tol: float = 1e-6, maxiter: int = DEFAULT_MAXITER) -> LoglikResult:
    """SKI log-likelihood on ``n``-vectors, reported in the GSGP decomposition.

    Probes are drawn exactly as in the statistics pass with ``probe_seed=seed``,
    so the two paths see identical probe vectors.
    """
    from .interp import rademacher_probes

    s2 = _noise(kg_op, noise_var)
    y = np.asarray(y, dtype=np.float64)
    n, m = W.n, W.m
    op = SkiOperator(kg_op, W, noise_var=s2)
    res = _check(cg(op, y, tol=solve_tol, maxiter=maxiter), "SKI loglik solve")
    quad = float(y @ res.x)
    Z = rademacher_probes(n, num_probes, seed)
    factors = []
    for j in range(num_probes):
        stop = None if k is not None else quadrature_stop(tol, _excess_log(s2))
        kk = min(n, m + 1) if k is None else k
        fac = lanczos(op, Z[:, j], kk, stop=stop)
        fac.Q = None  # n x k per probe; quadrature needs only T
        factors.append((fac, float(n)))
    ld_ski, ks = _slq_from_factors(factors, 1.0)
    ld = ld_ski - (n - m) * math.log(s2)
    return LoglikResult.build(ld, quad, n, m, s2, num_probes=num_probes, solver_iters=res.iters,
                              lanczos_iters=ks, route="ski")


# -- dense references --------------------------------------------------------

class DensePosterior(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray
    loglik: float


def _chol_logdet(A) -> tuple[np.ndarray, float]:
    L = np.linalg.cholesky(A)
    return L, float(2 * np.sum(np.log(np.diag(L))))


def ski_dense_posterior(W, KG, y, noise_var: float, Wtest) -> DensePosterior:
    """Mean, covariance at test weights and loglik of the SKI model, all dense (Cholesky)."""
    W = W.toarray() if sp.issparse(W) else np.asarray(W)
    Wtest = Wtest.toarray() if sp.issparse(Wtest) else np.asarray(Wtest)
    y = np.asarray(y, dtype=np.float64)
    n = W.shape[0]
    K = W @ KG @ W.T
    L, ld = _chol_logdet(0.5 * (K + K.T) + noise_var * np.eye(n))
    zt = scipy.linalg.cho_solve((L, True), y)
    kx = W @ KG @ Wtest.T
    mean = Wtest @ KG @ W.T @ zt
    cov = Wtest @ KG @ Wtest.T - kx.T @ scipy.linalg.cho_solve((L, True), kx)
    loglik = -0.5 * (ld + y @ zt + n * LOG_2PI)
    return DensePosterior(mean, cov, float(loglik))


def gsgp_dense_posterior(wtw, wty, yty: float, n: int, KG, noise_var: float, Wtest) -> DensePosterior:
    """Same quantities from sufficient statistics via the ``m x m`` GSGP system."""
    wtw = wtw.toarray() if sp.issparse(wtw) else np.asarray(wtw)
    Wtest = Wtest.toarray() if sp.issparse(Wtest) else np.asarray(Wtest)
    m = KG.shape[0]
    A = KG @ wtw + noise_var * np.eye(m)
    zbar = np.linalg.solve(A, KG @ wty)
    Cbar = noise_var * np.linalg.solve(A, KG)
    mean = Wtest @ zbar
    cov = Wtest @ Cbar @ Wtest.T
    ld = gsgp_logdet_dense(wtw, KG, noise_var)
    quad = (yty - wty @ zbar) / noise_var
    const = n * LOG_2PI + (n - m) * math.log(noise_var)
    return DensePosterior(mean, cov, float(-0.5 * (ld + quad + const)))


class ExactGPReference(NamedTuple):
    mean: Callable
    cov: Callable
    loglik: float


def exact_gp_reference(X, y, spec: KernelSpec, noise_var: float | None = None,
                       cap: int = EXACT_CAP) -> ExactGPReference:
    """Exact GP regression by dense Cholesky of ``K_X + s2 I``; the oracle for everything else."""
    X = np.asarray(X, dtype=np.float64).reshape(len(y), -1)
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if n > cap:
        raise ValueError(f"exact GP refused for n={n} > cap {cap}")
    s2 = spec.noise_var if noise_var is None else float(noise_var)
    K = kernel_matrix(spec, X) + s2 * np.eye(n)
    try:
        L, ld = _chol_logdet(K)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError("K_X + s2 I is not positive definite") from exc
    alpha = scipy.linalg.cho_solve((L, True), y)
    loglik = float(-0.5 * (ld + y @ alpha + n * LOG_2PI))

    def mean(T):
        T = np.asarray(T, dtype=np.float64).reshape(-1, X.shape[1])
        return kernel_matrix(spec, T, X) @ alpha

    def cov(T, T2=None):
        T = np.asarray(T, dtype=np.float64).reshape(-1, X.shape[1])
        T2 = T if T2 is None else np.asarray(T2, dtype=np.float64).reshape(-1, X.shape[1])
        ka = kernel_matrix(spec, X, T)
        kb = ka if T2 is T else kernel_matrix(spec, X, T2)
        return kernel_matrix(spec, T, T2) - ka.T @ scipy.linalg.cho_solve((L, True), kb)

    return ExactGPReference(mean, cov, loglik)


# -- persistence -------------------------------------------------------------

def save_model(path, model: PosteriorModel) -> None:
    from .io import MODEL_MAGIC, write_container

    st = model.stats
    coo = st.wtw.tocoo()
    meta = {
        "grid": model.grid.to_dict(),
        "kernel": model.spec.to_dict(),
        "noise_var": model.noise_var,
        "scheme": model.scheme.value,
        "path": model.path,
        "mean_offset": model.mean_offset,
        "n": st.n,
        "yty": st.yty,
        "sum_y": st.sum_y,
    }
    arrays = {
        "coef": model.coef,
        "rows": coo.row.astype(np.int64),
        "cols": coo.col.astype(np.int64),
        "vals": coo.data,
        "wty": st.wty,
    }
    if model.lowrank is not None:
        arrays["lowrank_R"] = model.lowrank.R
    write_container(path, MODEL_MAGIC, meta, arrays)


def load_model(path) -> PosteriorModel:
    from .io import MODEL_MAGIC, read_container

    meta, arr = read_container(path, MODEL_MAGIC)
    grid = Grid.from_dict(meta["grid"])
    spec = KernelSpec.from_dict(meta["kernel"])
    kg_op = ToeplitzOperator(grid, spec, meta["noise_var"])
    wtw = sp.csr_matrix((arr["vals"], (arr["rows"], arr["cols"])), shape=(grid.m, grid.m))
    scheme = Scheme(meta["scheme"])
    stats = SufficientStats(grid, scheme, wtw, arr["wty"], meta["yty"], meta["n"], meta["sum_y"])
    model = PosteriorModel(grid, spec, meta["noise_var"], scheme, kg_op, stats, arr["coef"], meta["path"],
                           meta["mean_offset"])
    if "lowrank_R" in arr:
        model.lowrank = LowRankCovariance(model, arr["lowrank_R"])
    return model
