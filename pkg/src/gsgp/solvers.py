"""Krylov solvers for the SKI system ``(W K_G W^T + s2 I) x = b``.

Besides plain CG and Lanczos on ``n``-vectors, the factorized variants keep
every iterate as ``z = W zhat + c z0`` (``zhat`` in R^m, scalar ``c``, a shared
reference vector ``z0``) so that after an O(n) setup each iteration costs
O(m log m): products with ``W K_G W^T + s2 I`` become products with
``K_G W^T W + s2 I`` and inner products go through ``W^T W``.

Convergence follows the squared-residual test ``r^T r <= eps`` with
``eps = tol**2 * ||b||**2`` unless ``eps`` is given explicitly.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import ToeplitzOperator
from .interp import InterpMatrix, SufficientStats

DEFAULT_TOL = 0.01
DEFAULT_MAXITER = 1000
BREAKDOWN_TOL = 1e-12


class SolverError(RuntimeError):
    pass


class NotSPDError(SolverError):
    """Curvature ``p^T A p <= 0``: the operator is not symmetric positive definite."""


class ConvergenceError(SolverError):
    def __init__(self, msg: str, residual_sq: float | None = None, iters: int | None = None):
        super().__init__(msg)
        self.residual_sq = residual_sq
        self.iters = iters


class SkiOperator:
    """``W K_G W^T + s2 I`` together with its GSGP counterpart ``K_G W^T W + s2 I``.

    ``W`` is optional: built from sufficient statistics alone the operator
    supports every factorized solver but not plain ``n``-vector products.
    Every product with ``K_G``, ``W^T W``, ``W`` and ``W^T`` is counted in
    :attr:`counts`.
    """

    def __init__(self, kg: ToeplitzOperator, W: InterpMatrix | None = None, wtw=None,
                 noise_var: float | None = None):
        if W is None and wtw is None:
            raise ValueError("need W or W^T W")
        self.kg_op = kg
        self.W = W
        if wtw is None:
            wtw = W.gram()
        self.wtw = sp.csr_matrix(wtw)
        self.noise_var = kg.noise_var if noise_var is None else float(noise_var)
        self.m = kg.m
        self.n = None if W is None else W.n
        if W is not None and W.m != self.m:
            raise ValueError(f"W has {W.m} columns, grid has {self.m} points")
        if self.wtw.shape != (self.m, self.m):
            raise ValueError("W^T W shape does not match the grid")
        self.counts: Counter = Counter()

    @classmethod
    def from_stats(cls, kg: ToeplitzOperator, stats: SufficientStats, noise_var: float | None = None):
        return cls(kg, None, stats.wtw, noise_var)

    def kg(self, v):
        self.counts["kg"] += 1
        return self.kg_op.matvec(v)

    def wtw_mv(self, v):
        self.counts["wtw"] += 1
        return self.wtw @ v

    def w(self, v):
        self._need_w()
        self.counts["w"] += 1
        return self.W.csr @ v

    def wt(self, u):
        self._need_w()
        self.counts["wt"] += 1
        return self.W.csr_t @ u

    def _need_w(self):
        if self.W is None:
            raise ValueError("operator was built without W; only factorized solvers apply")

    def apply(self, v):
        """SKI product ``(W K_G W^T + s2 I) v`` on an ``n``-vector."""
        v = np.asarray(v, dtype=np.float64)
        return self.w(self.kg(self.wt(v))) + self.noise_var * v

    matvec = apply

    def gsgp(self, v):
        """``(K_G W^T W + s2 I) v`` on an ``m``-vector."""
        return self.B(v)[0]

    def B(self, v):
        """Return ``((K_G W^T W + s2 I) v, W^T W v)`` for one product with each factor."""
        u = self.wtw_mv(v)
        return self.kg(u) + self.noise_var * v, u

    def dense(self) -> np.ndarray:
        """Dense SKI matrix (tests only)."""
        self._need_w()
        Wd = self.W.toarray()
        KG = np.column_stack([self.kg_op.column(j) for j in range(self.m)])
        return Wd @ KG @ Wd.T + self.noise_var * np.eye(self.n)

    def as_linear_operator(self) -> spla.LinearOperator:
        self._need_w()
        return spla.LinearOperator((self.n, self.n), matvec=self.apply, dtype=np.float64)

    def reset_counts(self):
        self.counts.clear()


@dataclass
class SolveResult:
    """Solution plus the diagnostics record used by the benchmarks."""

    x: np.ndarray | None
    iters: int
    converged: bool
    residual_sq: float
    eps: float
    wtx: np.ndarray | None = None
    residuals: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    loop_time: float = 0.0
    loop_matvecs: dict = field(default_factory=dict)

    @property
    def per_iter_time(self) -> float:
        return self.loop_time / self.iters if self.iters else 0.0

    def record(self) -> dict:
        return {
            "iters": self.iters,
            "converged": self.converged,
            "residual_sq": self.residual_sq,
            "eps": self.eps,
            "residual_trace": list(self.residuals),
            "loop_time_s": self.loop_time,
            "per_iter_time_s": self.per_iter_time,
            "matvecs": dict(self.loop_matvecs),
        }


def _as_matvec(op) -> Callable:
    if isinstance(op, np.ndarray) or sp.issparse(op):
        return lambda v: op @ v
    if hasattr(op, "matvec"):
        return op.matvec
    if callable(op):
        return op
    raise TypeError(f"cannot apply {type(op).__name__} as a linear operator")


def _threshold(tol, eps, b_sq) -> float:
    if eps is not None:
        return float(eps)
    tol = DEFAULT_TOL if tol is None else tol
    return float(tol) ** 2 * float(b_sq)


def _counts(op) -> Counter:
    return Counter(getattr(op, "counts", {}))


def _diff_counts(op, before: Counter) -> dict:
    now = _counts(op)
    return {k: now[k] - before.get(k, 0) for k in now if now[k] - before.get(k, 0)}


def cg(op, b, x0=None, tol: float | None = DEFAULT_TOL, eps: float | None = None,
       maxiter: int = DEFAULT_MAXITER, callback=None) -> SolveResult:
    """Conjugate gradient on an SPD operator (matrix, sparse matrix or object with ``matvec``)."""
    A = _as_matvec(op)
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    eps = _threshold(tol, eps, b @ b)
    r = b - A(x) if x0 is not None and np.any(x) else b.copy()
    rr = float(r @ r)
    res = SolveResult(None, 0, rr <= eps, rr, eps, residuals=[rr])
    before = _counts(op)
    t0 = time.perf_counter()
    if rr > eps:
        p = r.copy()
        for k in range(maxiter):
            Ap = A(p)
            pAp = float(p @ Ap)
            if not pAp > 0:
                raise NotSPDError(f"CG breakdown at iteration {k}: p^T A p = {pAp:.3e}")
            alpha = rr / pAp
            x += alpha * p
            r -= alpha * Ap
            rr_new = float(r @ r)
            res.alphas.append(alpha)
            res.residuals.append(rr_new)
            res.iters = k + 1
            if callback is not None:
                callback(k, {"x": x, "r": r, "p": p})
            if rr_new <= eps:
                rr = rr_new
                res.converged = True
                break
            beta = rr_new / rr
            res.betas.append(beta)
            p = r + beta * p
            rr = rr_new
    res.loop_time = time.perf_counter() - t0
    res.loop_matvecs = _diff_counts(op, before)
    res.residual_sq = rr
    res.x = x
    return res


# -- factorized building blocks ---------------------------------------------

@dataclass
class FactorizedBasis:
    """Precomputed images of the reference vector ``z0``.

    Holds ``K_G W^T z0``, ``W^T z0`` and ``z0^T z0``; ``z0`` itself is only
    kept when the caller wants full ``n``-vectors reconstructed.
    """

    kg_wt_z0: np.ndarray
    wt_z0: np.ndarray
    z0_sq: float
    z0: np.ndarray | None = None

    @classmethod
    def from_vector(cls, op: SkiOperator, z0) -> "FactorizedBasis":
        z0 = np.asarray(z0, dtype=np.float64)
        wtz = op.wt(z0)
        return cls(op.kg(wtz), wtz, float(z0 @ z0), z0)

    @classmethod
    def from_images(cls, op: SkiOperator, wt_z0, z0_sq: float) -> "FactorizedBasis":
        wt_z0 = np.asarray(wt_z0, dtype=np.float64)
        return cls(op.kg(wt_z0), wt_z0, float(z0_sq))

    def reconstruct(self, W: InterpMatrix, zhat, c) -> np.ndarray:
        if self.z0 is None:
            raise ValueError("basis was built from images; z0 is unavailable")
        return W.csr @ zhat + c * self.z0


def factorized_update(op: SkiOperator, basis: FactorizedBasis, zhat, c):
    """Map ``(zhat, c)`` representing ``z`` to the representation of ``(W K_G W^T + s2 I) z``."""
    zhat = np.asarray(zhat, dtype=np.float64)
    if zhat.shape != (op.m,):
        raise ValueError(f"expected compressed vector of length {op.m}, got {zhat.shape}")
    return op.gsgp(zhat) + c * basis.kg_wt_z0, op.noise_var * c


def factorized_inner(wtw, z, y, wt_z0, wt_y0, y0_z0: float) -> float:
    """``<W zhat + c z0, W yhat + d y0>`` from one product with ``W^T W``.

    ``wtw`` is a sparse matrix, :class:`SkiOperator` or :class:`SufficientStats`.
    """
    zhat, c = z
    yhat, d = y
    zhat = np.asarray(zhat, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if zhat.shape != yhat.shape or zhat.shape != np.shape(wt_z0):
        raise ValueError("compressed vectors and basis images must have equal length")
    if isinstance(wtw, SkiOperator):
        u = wtw.wtw_mv(yhat)
    else:
        u = (wtw.wtw if isinstance(wtw, SufficientStats) else wtw) @ yhat
    return float(zhat @ u + d * (zhat @ wt_y0) + c * (yhat @ wt_z0) + c * d * y0_z0)


def _finish_x(op: SkiOperator, xhat, cx, r0, x0):
    if op.W is None or r0 is None:
        return None
    x = op.w(xhat) + cx * r0
    return x if x0 is None else x + x0


def _initial_residual(op: SkiOperator, b, x0):
    b = np.asarray(b, dtype=np.float64)
    if x0 is None or not np.any(x0):
        return b.copy(), None
    x0 = np.asarray(x0, dtype=np.float64)
    return b - op.apply(x0), x0


def fcg(op: SkiOperator, b, x0=None, tol: float | None = DEFAULT_TOL, eps: float | None = None,
        maxiter: int = DEFAULT_MAXITER, callback=None) -> SolveResult:
    """Factorized CG: iterates are kept as ``W xhat + c r0`` and never formed in R^n.

    Produces the same iterates as :func:`cg` on ``W K_G W^T + s2 I`` up to
    rounding; the returned ``x`` is reconstructed once at exit.
    """
    b = np.asarray(b, dtype=np.float64)
    eps = _threshold(tol, eps, b @ b)
    r0, x0 = _initial_residual(op, b, x0)
    basis = FactorizedBasis.from_vector(op, r0)
    h, rho = basis.wt_z0, basis.z0_sq
    m = op.m

    def inner(a, bb):
        return factorized_inner(op, a, bb, h, h, rho)

    rhat, cr = np.zeros(m), 1.0
    phat, cp = np.zeros(m), 1.0
    xhat, cx = np.zeros(m), 0.0
    rr = rho
    res = SolveResult(None, 0, rr <= eps, rr, eps, residuals=[rr])
    before = _counts(op)
    t0 = time.perf_counter()
    if rr > eps:
        for k in range(maxiter):
            Ap = factorized_update(op, basis, phat, cp)
            pAp = inner((phat, cp), Ap)
            if not pAp > 0:
                raise NotSPDError(f"FCG breakdown at iteration {k}: p^T A p = {pAp:.3e}")
            alpha = rr / pAp
            xhat = xhat + alpha * phat
            cx = cx + alpha * cp
            rhat = rhat - alpha * Ap[0]
            cr = cr - alpha * Ap[1]
            rr_new = inner((rhat, cr), (rhat, cr))
            res.alphas.append(alpha)
            res.residuals.append(rr_new)
            res.iters = k + 1
            if callback is not None:
                callback(k, {"rhat": rhat, "cr": cr, "phat": phat, "cp": cp, "xhat": xhat, "cx": cx,
                             "r0": r0})
            if rr_new <= eps:
                rr = rr_new
                res.converged = True
                break
            beta = rr_new / rr
            res.betas.append(beta)
            phat = rhat + beta * phat
            cp = cr + beta * cp
            rr = rr_new
    res.loop_time = time.perf_counter() - t0
    res.loop_matvecs = _diff_counts(op, before)
    res.residual_sq = rr
    res.wtx = op.wtw_mv(xhat) + cx * h + (0.0 if x0 is None else op.wt(x0))
    res.x = _finish_x(op, xhat, cx, r0, x0)
    return res


def efcg(op: SkiOperator, b, x0=None, tol: float | None = DEFAULT_TOL, eps: float | None = None,
         maxiter: int = DEFAULT_MAXITER, callback=None) -> SolveResult:
    """Efficiently factorized CG: one ``K_G`` and one ``W^T W`` product per iteration.

    Alongside the compressed residual and direction it carries their images
    ``vhat = A_G rhat``, ``uhat = W^T W rhat``, ``zhat = A_G phat`` and
    ``shat = W^T W phat`` (``A_G = K_G W^T W + s2 I``), so every inner
    product reuses the single ``B`` evaluation of the iteration.
    """
    b = np.asarray(b, dtype=np.float64)
    eps = _threshold(tol, eps, b @ b)
    r0, x0 = _initial_residual(op, b, x0)
    h = op.wt(r0)
    g = op.kg(h)
    rho = float(r0 @ r0)
    s2 = op.noise_var
    m = op.m
    rhat, cr = np.zeros(m), 1.0
    phat, cp = np.zeros(m), 1.0
    xhat, cx = np.zeros(m), 0.0
    uhat = np.zeros(m)
    zhat = np.zeros(m)
    shat = np.zeros(m)

    def rnorm(rh, u, c):
        return float(u @ rh + c * c * rho + 2 * c * (rh @ h))

    rr = rho
    res = SolveResult(None, 0, rr <= eps, rr, eps, residuals=[rr])
    before = _counts(op)
    t0 = time.perf_counter()
    if rr > eps:
        for k in range(maxiter):
            # A p = (zhat + cp g, s2 cp)
            a_hat = zhat + cp * g
            a_c = s2 * cp
            pAp = float(shat @ zhat + cp * (shat @ g) + a_c * (phat @ h) + cp * (a_hat @ h) + cp * a_c * rho)
            if not pAp > 0:
                raise NotSPDError(f"EFCG breakdown at iteration {k}: p^T A p = {pAp:.3e}")
            alpha = rr / pAp
            xhat = xhat + alpha * phat
            cx = cx + alpha * cp
            rhat = rhat - alpha * a_hat
            cr = cr - alpha * a_c
            vhat, uhat = op.B(rhat)
            rr_new = rnorm(rhat, uhat, cr)
            res.alphas.append(alpha)
            res.residuals.append(rr_new)
            res.iters = k + 1
            if callback is not None:
                callback(k, {"rhat": rhat, "cr": cr, "xhat": xhat, "cx": cx})
            if rr_new <= eps:
                rr = rr_new
                res.converged = True
                break
            beta = rr_new / rr
            res.betas.append(beta)
            phat = rhat + beta * phat
            cp = cr + beta * cp
            shat = uhat + beta * shat
            zhat = vhat + beta * zhat
            rr = rr_new
    res.loop_time = time.perf_counter() - t0
    res.loop_matvecs = _diff_counts(op, before)
    res.residual_sq = rr
    res.wtx = op.wtw_mv(xhat) + cx * h + (0.0 if x0 is None else op.wt(x0))
    res.x = _finish_x(op, xhat, cx, r0, x0)
    return res


def efcg_simplified(op: SkiOperator, rhat0, tol: float | None = DEFAULT_TOL, eps: float | None = None,
                    rhs_norm_sq: float | None = None, maxiter: int = DEFAULT_MAXITER,
                    callback=None) -> SolveResult:
    """EFCG when the initial residual is ``r0 = W rhat0``; needs only ``K_G`` and ``W^T W``.

    Returns ``xd`` (as ``wtx``) with ``W^T x_final = xd + W^T x0``. For the
    posterior mean take ``x0 = y / s2``, so ``rhat0 = -K_G W^T y / s2`` and
    ``W^T (K + s2 I)^{-1} y = xd + W^T y / s2``; for covariance columns take
    ``x0 = 0`` and ``b = W yhat``, i.e. ``rhat0 = yhat``.

    ``rhs_norm_sq`` is ``||b||^2`` for the relative tolerance; it defaults to
    the initial residual norm.
    """
    rhat = np.array(rhat0, dtype=np.float64)
    if rhat.shape != (op.m,):
        raise ValueError(f"expected compressed residual of length {op.m}, got {rhat.shape}")
    vhat, uhat = op.B(rhat)
    rr = float(uhat @ rhat)
    eps = _threshold(tol, eps, rr if rhs_norm_sq is None else rhs_norm_sq)
    zhat, shat = vhat.copy(), uhat.copy()
    xd = np.zeros(op.m)
    res = SolveResult(None, 0, rr <= eps, rr, eps, residuals=[rr])
    before = _counts(op)
    t0 = time.perf_counter()
    if rr > eps:
        for k in range(maxiter):
            pAp = float(shat @ zhat)
            if not pAp > 0:
                raise NotSPDError(f"EFCG breakdown at iteration {k}: p^T A p = {pAp:.3e}")
            alpha = rr / pAp
            xd += alpha * shat
            rhat -= alpha * zhat
            vhat, uhat = op.B(rhat)
            rr_new = float(uhat @ rhat)
            res.alphas.append(alpha)
            res.residuals.append(rr_new)
            res.iters = k + 1
            if callback is not None:
                callback(k, {"rhat": rhat, "xd": xd})
            if rr_new <= eps:
                rr = rr_new
                res.converged = True
                break
            beta = rr_new / rr
            res.betas.append(beta)
            shat = uhat + beta * shat
            zhat = vhat + beta * zhat
            rr = rr_new
    res.loop_time = time.perf_counter() - t0
    res.loop_matvecs = _diff_counts(op, before)
    res.residual_sq = rr
    res.wtx = xd
    return res


def symmetric_gsgp_solve(op: SkiOperator, rhs, tol: float | None = 1e-8, eps: float | None = None,
                         maxiter: int = DEFAULT_MAXITER) -> SolveResult:
    """``(K_G W^T W + s2 I)^{-1} rhs`` as ``K_G (K_G W^T W K_G + s2 K_G)^{-1} rhs`` via CG.

    The symmetric operator loses the ``A + s2 I`` form and is only PSD when
    ``K_G`` is numerically singular; breakdown then raises
    :class:`NotSPDError` and the factorized solvers should be used instead.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    s2 = op.noise_var

    class _Sym:
        counts = op.counts

        @staticmethod
        def matvec(v):
            kv = op.kg(v)
            return op.kg(op.wtw_mv(kv)) + s2 * kv

    try:
        res = cg(_Sym, rhs, tol=tol, eps=eps, maxiter=maxiter)
    except NotSPDError as exc:
        raise NotSPDError(f"{exc}; K_G is too ill-conditioned for the symmetric form, "
                          "use efcg_simplified instead") from exc
    res.x = op.kg(res.x)
    return res


# -- Lanczos -------------------------------------------------------------------

@dataclass
class TridiagonalFactor:
    """Lanczos output: ``T`` (diagonal ``alpha``, off-diagonal ``beta``) and its basis.

    Standard Lanczos stores ``Q`` (n x k). Factorized Lanczos stores ``Qhat``
    (m x k) and ``d`` with ``Q[:, i] = W Qhat[:, i] + d[i] * b / ||b||``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    b_norm: float
    Q: np.ndarray | None = None
    Qhat: np.ndarray | None = None
    d: np.ndarray | None = None
    Phat: np.ndarray | None = None
    breakdown: bool = False
    loop_matvecs: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return int(self.alpha.size)

    def T(self) -> np.ndarray:
        return np.diag(self.alpha) + np.diag(self.beta, 1) + np.diag(self.beta, -1)

    def eigh(self):
        if self.k == 1:
            return self.alpha.copy(), np.ones((1, 1))
        return scipy.linalg.eigh_tridiagonal(self.alpha, self.beta)

    def quadrature(self, f) -> float:
        """``b^T f(A) b`` estimated by Gauss quadrature on ``T``."""
        theta, S = self.eigh()
        return float(self.b_norm**2 * np.sum(S[0] ** 2 * f(theta)))

    def basis(self, W: InterpMatrix | None = None, b=None) -> np.ndarray:
        """Explicit ``Q`` (reconstructed from the compressed form when needed)."""
        if self.Q is not None:
            return self.Q
        b = np.asarray(b, dtype=np.float64)
        return W.csr @ self.Qhat + np.outer(b / self.b_norm, self.d)


def _tridiag_quadrature(alpha, beta, f) -> float:
    alpha = np.asarray(alpha)
    if alpha.size == 1:
        return float(f(alpha)[0])
    theta, S = scipy.linalg.eigh_tridiagonal(alpha, np.asarray(beta))
    return float(np.sum(S[0] ** 2 * f(theta)))


def _breakdown(beta: float, alphas: list, betas: list, tol: float) -> bool:
    scale = max(max(abs(a) for a in alphas), max(betas, default=0.0))
    return beta <= tol * scale


# A factorized norm is a sum of terms that cancel as the Lanczos residual
# shrinks; once the sum is within this many ulps of the term magnitudes it
# carries no correct digits and the basis vector it would normalise is noise.
CANCEL_ULPS = 100.0


def _factorized_norm(terms) -> tuple[float, bool]:
    total = float(sum(terms))
    lost = total <= CANCEL_ULPS * np.finfo(float).eps * float(sum(abs(t) for t in terms))
    return float(np.sqrt(max(total, 0.0))), lost


def lanczos(op, b, k: int, reorth: int = 2, breakdown_tol: float = BREAKDOWN_TOL,
            stop: Callable | None = None) -> TridiagonalFactor:
    """Lanczos tridiagonalisation with full reorthogonalisation.

    ``stop(alpha, beta)`` may end the recurrence early once ``T_i`` is complete.
    An invariant subspace (tiny ``beta``) ends it early as well.
    """
    A = _as_matvec(op)
    b = np.asarray(b, dtype=np.float64)
    n = b.size
    bn = float(np.linalg.norm(b))
    if bn == 0:
        raise ValueError("Lanczos needs a nonzero start vector")
    k = int(min(k, n))
    Q = np.zeros((n, k))
    Q[:, 0] = b / bn
    alphas: list[float] = []
    betas: list[float] = []
    q_prev = np.zeros(n)
    beta = 0.0
    brk = False
    for i in range(k):
        q = Q[:, i]
        w = A(q) - beta * q_prev
        a = float(q @ w)
        alphas.append(a)
        if i == k - 1 or (stop is not None and stop(alphas, betas)):
            break
        w -= a * q
        for _ in range(reorth):
            w -= Q[:, : i + 1] @ (Q[:, : i + 1].T @ w)
        beta = float(np.linalg.norm(w))
        if _breakdown(beta, alphas, betas, breakdown_tol):
            brk = True
            break
        betas.append(beta)
        q_prev = q
        Q[:, i + 1] = w / beta
    kk = len(alphas)
    return TridiagonalFactor(np.array(alphas), np.array(betas[: kk - 1]), bn, Q=Q[:, :kk], breakdown=brk)


def _start_images(op: SkiOperator, b, wtb, b_sq):
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        wtb = op.wt(b)
        b_sq = float(b @ b)
    elif wtb is None or b_sq is None:
        raise ValueError("need b (with W) or its images W^T b and b^T b")
    bn = float(np.sqrt(b_sq))
    if bn == 0:
        raise ValueError("Lanczos needs a nonzero start vector")
    return np.asarray(wtb, dtype=np.float64) / bn, bn


def fla(op: SkiOperator, b=None, k: int = 10, wtb=None, b_sq: float | None = None, reorth: int = 2,
        breakdown_tol: float = BREAKDOWN_TOL, stop: Callable | None = None) -> TridiagonalFactor:
    """Factorized Lanczos on the SKI operator, basis kept as ``W Qhat + b d^T / ||b||``.

    The start vector is given directly (needs ``W``) or through ``W^T b`` and
    ``b^T b``.
    """
    h, bn = _start_images(op, b, wtb, b_sq)
    basis = FactorizedBasis(op.kg(h), h, 1.0)
    m = op.m
    n_cap = op.n if op.n is not None else np.inf
    k = int(min(k, n_cap))
    Qh = np.zeros((m, k))
    d = np.zeros(k)
    d[0] = 1.0
    qh_prev, c_prev = np.zeros(m), 0.0
    beta = 0.0
    alphas: list[float] = []
    betas: list[float] = []
    brk = False

    def inner_many(qh, c):
        u = op.wtw_mv(qh)
        return Qh[:, : i + 1].T @ u + d[: i + 1] * (qh @ h) + c * (Qh[:, : i + 1].T @ h) + d[: i + 1] * c

    for i in range(k):
        qh_i, c_i = Qh[:, i], d[i]
        Aq, Ac = factorized_update(op, basis, qh_i, c_i)
        qh = Aq - beta * qh_prev
        c = Ac - beta * c_prev
        a = factorized_inner(op, (qh_i, c_i), (qh, c), h, h, 1.0)
        alphas.append(a)
        if i == k - 1 or (stop is not None and stop(alphas, betas)):
            break
        qh = qh - a * qh_i
        c = c - a * c_i
        for _ in range(reorth):
            lam = inner_many(qh, c)
            qh = qh - Qh[:, : i + 1] @ lam
            c = c - d[: i + 1] @ lam
        u = op.wtw_mv(qh)
        beta, lost = _factorized_norm((float(qh @ u), 2 * c * float(qh @ h), c * c))
        if lost or _breakdown(beta, alphas, betas, breakdown_tol):
            brk = True
            break
        betas.append(beta)
        qh_prev, c_prev = qh_i, c_i
        Qh[:, i + 1] = qh / beta
        d[i + 1] = c / beta
    kk = len(alphas)
    return TridiagonalFactor(np.array(alphas), np.array(betas[: kk - 1]), bn, Qhat=Qh[:, :kk],
                             d=d[:kk], breakdown=brk)


def efla(op: SkiOperator, b=None, k: int = 10, wtb=None, b_sq: float | None = None, reorth: int = 2,
         breakdown_tol: float = BREAKDOWN_TOL, stop: Callable | None = None) -> TridiagonalFactor:
    """Efficiently factorized Lanczos: one ``B`` evaluation per iteration.

    Keeps ``Phat = W^T W Qhat`` and ``shat_i = (K_G W^T W + s2 I) qhat_i`` so
    that all inner products (including reorthogonalisation) are matvec-free.
    """
    h, bn = _start_images(op, b, wtb, b_sq)
    g = op.kg(h)
    s2 = op.noise_var
    m = op.m
    n_cap = op.n if op.n is not None else np.inf
    k = int(min(k, n_cap))
    Qh = np.zeros((m, k))
    Ph = np.zeros((m, k))
    qTh = np.zeros(k)
    d = np.zeros(k)
    d[0] = 1.0
    s_hat = np.zeros(m)
    qh_prev, c_prev = np.zeros(m), 0.0
    beta = 0.0
    alphas: list[float] = []
    betas: list[float] = []
    brk = False
    before = _counts(op)
    for i in range(k):
        qh_i, c_i = Qh[:, i], d[i]
        qh = s_hat + c_i * g - beta * qh_prev
        c = s2 * c_i - beta * c_prev
        a = float(Ph[:, i] @ qh + c_i * c + c_i * (qh @ h) + c * qTh[i])
        alphas.append(a)
        if i == k - 1 or (stop is not None and stop(alphas, betas)):
            break
        qh = qh - a * qh_i
        c = c - a * c_i
        for _ in range(reorth):
            qh_h = qh @ h
            lam = Ph[:, : i + 1].T @ qh + (c + qh_h) * d[: i + 1] + c * qTh[: i + 1]
            qh = qh - Qh[:, : i + 1] @ lam
            c = c - d[: i + 1] @ lam
        s_new, p_new = op.B(qh)
        qh_h = float(qh @ h)
        beta, lost = _factorized_norm((float(p_new @ qh), c * c, 2 * c * qh_h))
        if lost or _breakdown(beta, alphas, betas, breakdown_tol):
            brk = True
            break
        betas.append(beta)
        qh_prev, c_prev = qh_i, c_i
        Qh[:, i + 1] = qh / beta
        d[i + 1] = c / beta
        Ph[:, i + 1] = p_new / beta
        qTh[i + 1] = qh_h / beta
        s_hat = s_new / beta
    kk = len(alphas)
    return TridiagonalFactor(np.array(alphas), np.array(betas[: kk - 1]), bn, Qhat=Qh[:, :kk],
                             d=d[:kk], Phat=Ph[:, :kk], breakdown=brk,
                             loop_matvecs=_diff_counts(op, before))


def quadrature_stop(tol: float, f=np.log, min_steps: int = 2) -> Callable:
    """Stop rule: relative change of ``e1^T f(T_i) e1`` between steps below ``tol``."""
    state = {"prev": None}

    def stop(alphas, betas):
        cur = _tridiag_quadrature(alphas, betas[: len(alphas) - 1], f)
        prev = state["prev"]
        state["prev"] = cur
        if prev is None or len(alphas) < min_steps:
            return False
        return abs(cur - prev) <= tol * max(abs(cur), 1e-300)

    return stop
