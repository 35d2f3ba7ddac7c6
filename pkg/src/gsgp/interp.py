"""Local interpolation weights, the sparse matrix ``W`` and GSGP sufficient statistics.

Weights are tensor products of 1-d kernels: linear (``r = 1``) or Keys cubic
convolution with ``a = -1/2`` (``r = 2``). A point is interpolable only if every
grid node carrying a nonzero weight lies on the grid; there is no clamping.

The sufficient statistics ``W^T W``, ``W^T y``, ``y^T y`` are accumulated in one
pass over the data without materialising ``W``. Within a stencil the
displacement between two nodes depends only on their stencil positions, so the
outer products ``w w^T`` are accumulated into an ``(m, (4r-1)^d)`` band keyed by
(row, displacement) and converted to CSR at the end.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np
import scipy.sparse as sp

from .grid import Grid

SNAP_TOL = 1e-9


class InterpolationError(ValueError):
    """A point has no complete interpolation stencil on the grid."""

    def __init__(self, msg: str, index: int | None = None):
        super().__init__(msg if index is None else f"{msg} (at data position {index})")
        self.index = index


class Scheme(enum.Enum):
    LINEAR = "linear"
    CUBIC = "cubic"

    @property
    def radius(self) -> int:
        return 1 if self is Scheme.LINEAR else 2

    @property
    def support(self) -> int:
        return 2 * self.radius


def keys_cubic(t) -> np.ndarray:
    """Keys cubic convolution kernel with ``a = -1/2``."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    tn, tf = t[near], t[far]
    out[near] = 1.5 * tn**3 - 2.5 * tn**2 + 1
    out[far] = -0.5 * tf**3 + 2.5 * tf**2 - 4 * tf + 2
    return out


def linear_kernel(t) -> np.ndarray:
    t = np.abs(np.asarray(t, dtype=np.float64))
    return np.where(t <= 1, 1 - t, 0.0)


def _kernel(scheme: Scheme):
    return linear_kernel if scheme is Scheme.LINEAR else keys_cubic


def _axis_stencil(grid: Grid, axis: int, x: np.ndarray, scheme: Scheme):
    """1-d node indices ``(N, 2r)``, weights and a validity mask along one axis."""
    n = grid.sizes[axis]
    r = scheme.radius
    offsets = np.arange(-r + 1, r + 1)
    if n == 1:
        idx = np.zeros((x.size, 2 * r), dtype=np.int64)
        w = np.zeros((x.size, 2 * r))
        w[:, r - 1] = 1.0
        return idx, w, x == grid.lower[axis]
    t = (x - grid.lower[axis]) / grid.spacing[axis]
    rt = np.round(t)
    t = np.where(np.abs(t - rt) < SNAP_TOL, rt, t)
    j = np.floor(t)
    f = t - j
    nodes = j[:, None] + offsets[None, :]
    w = _kernel(scheme)(f[:, None] - offsets[None, :])
    inside = (nodes >= 0) & (nodes <= n - 1)
    valid = np.all(inside | (w == 0), axis=1) & np.isfinite(t)
    idx = np.clip(np.nan_to_num(nodes), 0, n - 1).astype(np.int64)
    w = np.where(inside, w, 0.0)
    return idx, w, valid


def stencils(grid: Grid, X, scheme="cubic", start: int = 0):
    """Flat node indices and weights ``(N, (2r)^d)`` for every row of ``X``.

    Stencil positions are ordered row-major over the per-axis offsets.
    Raises :class:`InterpolationError` naming the first offending row
    (offset by ``start`` for streamed data).
    """
    scheme = Scheme(scheme)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None] if grid.ndim == 1 else X[None, :]
    if X.shape[1] != grid.ndim:
        raise ValueError(f"points have dimension {X.shape[1]}, grid has {grid.ndim}")
    N = X.shape[0]
    strides = grid.strides
    flat = np.zeros((N, 1), dtype=np.int64)
    w = np.ones((N, 1))
    valid = np.ones(N, dtype=bool)
    for axis in range(grid.ndim):
        ia, wa, va = _axis_stencil(grid, axis, X[:, axis], scheme)
        valid &= va
        flat = (flat[:, :, None] + strides[axis] * ia[:, None, :]).reshape(N, -1)
        w = (w[:, :, None] * wa[:, None, :]).reshape(N, -1)
    if not valid.all():
        bad = int(np.flatnonzero(~valid)[0])
        raise InterpolationError(
            f"point {X[bad].tolist()} lies outside the interpolable region of the grid", start + bad
        )
    return flat, w


@dataclass(frozen=True)
class WeightVector:
    indices: np.ndarray
    values: np.ndarray
    scheme: Scheme

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def dense(self, m: int) -> np.ndarray:
        out = np.zeros(m)
        out[self.indices] = self.values
        return out


def interp_weights(grid: Grid, x, scheme="cubic") -> WeightVector:
    """Interpolation weights of a single point, exact zeros dropped."""
    scheme = Scheme(scheme)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != (grid.ndim,):
        raise ValueError(f"point has shape {x.shape}, grid has d={grid.ndim}")
    idx, w = stencils(grid, x[None, :], scheme)
    keep = w[0] != 0
    return WeightVector(idx[0, keep], w[0, keep], scheme)


class InterpMatrix:
    """Row-compressed ``n x m`` interpolation matrix (rows are weight vectors)."""

    def __init__(self, csr: sp.csr_matrix, scheme: Scheme):
        self.csr = csr
        self.csr_t = csr.T.tocsr()
        self.scheme = scheme

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape

    @property
    def n(self) -> int:
        return self.csr.shape[0]

    @property
    def m(self) -> int:
        return self.csr.shape[1]

    @property
    def nnz(self) -> int:
        return int(self.csr.nnz)

    def row(self, i: int) -> WeightVector:
        lo, hi = self.csr.indptr[i], self.csr.indptr[i + 1]
        return WeightVector(self.csr.indices[lo:hi].copy(), self.csr.data[lo:hi].copy(), self.scheme)

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()

    def gram(self) -> sp.csr_matrix:
        """``W^T W`` computed directly (reference for the streamed version)."""
        return (self.csr_t @ self.csr).tocsr()


def _weights_csr(idx: np.ndarray, w: np.ndarray, m: int) -> sp.csr_matrix:
    N, P = w.shape
    mat = sp.csr_matrix((w.ravel(), idx.ravel(), np.arange(0, N * P + 1, P)), shape=(N, m))
    mat.eliminate_zeros()
    mat.sum_duplicates()
    return mat


def build_W(grid: Grid, X, scheme="cubic") -> InterpMatrix:
    scheme = Scheme(scheme)
    idx, w = stencils(grid, X, scheme)
    return InterpMatrix(_weights_csr(idx, w, grid.m), scheme)


def weights_matrix(grid: Grid, X, scheme="cubic") -> sp.csr_matrix:
    """Sparse ``(N, m)`` matrix whose rows are the weight vectors of ``X``."""
    return build_W(grid, X, scheme).csr


def w_matvec(W: InterpMatrix, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != W.m:
        raise ValueError(f"expected length {W.m}, got {v.shape[0]}")
    return W.csr @ v


def wt_matvec(W: InterpMatrix, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape[0] != W.n:
        raise ValueError(f"expected length {W.n}, got {u.shape[0]}")
    return W.csr_t @ u


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    """+-1 entries; consumes one double per entry so chunked draws concatenate."""
    return np.where(rng.random(shape) < 0.5, -1.0, 1.0)


def rademacher_probes(n: int, num_probes: int, seed: int) -> np.ndarray:
    """The ``(n, num_probes)`` probe matrix whose ``W``-images the stats pass records."""
    return rademacher(np.random.default_rng(seed), (n, num_probes))


@dataclass(frozen=True)
class SufficientStats:
    """``W^T W`` (sparse symmetric), ``W^T y``, ``y^T y`` and ``n``.

    ``sum_y`` allows re-centering the response afterwards. ``probe_wtw`` holds
    ``W^T z_j`` for Rademacher probes ``z_j`` drawn during the same pass
    (stochastic log-determinants of the SKI operator need them).
    """

    grid: Grid
    scheme: Scheme
    wtw: sp.csr_matrix
    wty: np.ndarray
    yty: float
    n: int
    sum_y: float = 0.0
    probe_wtz: np.ndarray | None = None
    probe_seed: int | None = None

    @property
    def m(self) -> int:
        return self.grid.m

    @property
    def num_probes(self) -> int:
        return 0 if self.probe_wtz is None else self.probe_wtz.shape[1]

    @property
    def wt1(self) -> np.ndarray:
        """``W^T 1``: equals ``W^T W 1`` by partition of unity."""
        return self.wtw @ np.ones(self.m)

    def merge(self, other: "SufficientStats") -> "SufficientStats":
        """Combine statistics of disjoint data shards (commutative, associative)."""
        if other.grid != self.grid or other.scheme is not self.scheme:
            raise ValueError("cannot merge statistics from different grids or schemes")
        probes = None
        if self.probe_wtz is not None or other.probe_wtz is not None:
            if self.num_probes != other.num_probes or self.probe_seed != other.probe_seed:
                raise ValueError("probe images differ in count or seed")
            probes = self.probe_wtz + other.probe_wtz
        wtw = (self.wtw + other.wtw).tocsr()
        wtw.sort_indices()
        return SufficientStats(
            self.grid, self.scheme, wtw, self.wty + other.wty, self.yty + other.yty,
            self.n + other.n, self.sum_y + other.sum_y, probes, self.probe_seed,
        )

    __add__ = merge

    def centered(self, mu: float) -> "SufficientStats":
        """Statistics of ``y - mu`` (uses ``W^T 1 = W^T W 1``)."""
        wty = self.wty - mu * self.wt1
        yty = self.yty - 2 * mu * self.sum_y + self.n * mu**2
        return SufficientStats(
            self.grid, self.scheme, self.wtw, wty, yty, self.n,
            self.sum_y - self.n * mu, self.probe_wtz, self.probe_seed,
        )


class StatsAccumulator:
    """Streaming builder for :class:`SufficientStats`.

    Feed chunks with :meth:`update`; memory is ``O(m (4r-1)^d)`` plus the
    current chunk, independent of the number of points seen.
    """

    # entries of one chunk's outer-product expansion
    CHUNK_ENTRIES = 1 << 20
    BINCOUNT_LIMIT = 1 << 24

    def __init__(self, grid: Grid, scheme="cubic", num_probes: int = 0, probe_seed: int = 0,
                 row_offset: int = 0):
        self.grid = grid
        self.scheme = Scheme(scheme)
        d, r = grid.ndim, self.scheme.radius
        self.P = (2 * r) ** d
        self.K = (4 * r - 1) ** d
        m = grid.m
        self.band = np.zeros(m * self.K)
        self.wty = np.zeros(m)
        self.yty = 0.0
        self.sum_y = 0.0
        self.n = 0
        self.row_offset = row_offset
        pos = np.array(list(itertools.product(range(2 * r), repeat=d)), dtype=np.int64)
        diff = pos[None, :, :] - pos[:, None, :] + (2 * r - 1)
        radix = (4 * r - 1) ** np.arange(d - 1, -1, -1)
        self.pair_code = (diff @ radix).astype(np.int64)
        disp = np.array(list(itertools.product(range(-(2 * r - 1), 2 * r), repeat=d)), dtype=np.int64)
        self.code_offset = disp @ grid.strides
        self.code_disp = disp
        self.num_probes = int(num_probes)
        self.probe_seed = int(probe_seed)
        self.probe_wtz = np.zeros((m, self.num_probes)) if self.num_probes else None
        self._rng = np.random.default_rng(self.probe_seed) if self.num_probes else None
        if self.num_probes and row_offset:
            left = row_offset
            while left:
                take = min(left, 1 << 16)
                self._rng.random((take, self.num_probes))
                left -= take

    @property
    def chunk_size(self) -> int:
        return max(1, self.CHUNK_ENTRIES // (self.P * self.P))

    def update(self, X, y) -> None:
        y = np.asarray(y, dtype=np.float64).ravel()
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None] if self.grid.ndim == 1 else X[None, :]
        if X.shape[0] != y.size:
            raise ValueError(f"{X.shape[0]} points but {y.size} responses")
        cs = self.chunk_size
        for lo in range(0, y.size, cs):
            self._update_chunk(X[lo:lo + cs], y[lo:lo + cs])

    def _update_chunk(self, X: np.ndarray, y: np.ndarray) -> None:
        if y.size == 0:
            return
        m = self.grid.m
        idx, w = stencils(self.grid, X, self.scheme, start=self.row_offset + self.n)
        keys = (idx[:, :, None] * self.K + self.pair_code[None, :, :]).ravel()
        vals = (w[:, :, None] * w[:, None, :]).ravel()
        if self.band.size <= self.BINCOUNT_LIMIT:
            self.band += np.bincount(keys, vals, minlength=self.band.size)
        else:
            uk, inv = np.unique(keys, return_inverse=True)
            self.band[uk] += np.bincount(inv, vals, minlength=uk.size)
        self.wty += np.bincount(idx.ravel(), (w * y[:, None]).ravel(), minlength=m)
        self.yty += float(y @ y)
        self.sum_y += float(y.sum())
        if self.num_probes:
            Z = rademacher(self._rng, (y.size, self.num_probes))
            Wc = _weights_csr(idx, w, m)
            self.probe_wtz += np.asarray(Wc.T @ Z)
        self.n += y.size

    def finalize(self) -> SufficientStats:
        m, K = self.grid.m, self.K
        nz = np.flatnonzero(self.band)
        rows = nz // K
        cols = rows + self.code_offset[nz % K]
        if cols.size and (cols.min() < 0 or cols.max() >= m):
            raise AssertionError("band entry maps outside the grid")
        wtw = sp.csr_matrix((self.band[nz], (rows, cols)), shape=(m, m))
        wtw.sort_indices()
        probes = None if self.probe_wtz is None else self.probe_wtz.copy()
        return SufficientStats(
            self.grid, self.scheme, wtw, self.wty.copy(), self.yty, self.n, self.sum_y,
            probes, self.probe_seed if self.num_probes else None,
        )


def sufficient_stats(grid: Grid, scheme, data: Iterable, num_probes: int = 0,
                     probe_seed: int = 0) -> SufficientStats:
    """One pass over a stream of ``(x, y)`` pairs.

    Pairs are buffered into fixed-size chunks; nothing proportional to the
    stream length is kept.
    """
    acc = StatsAccumulator(grid, scheme, num_probes, probe_seed)
    buf_x: list = []
    buf_y: list = []
    cs = acc.chunk_size
    for x, y in data:
        buf_x.append(np.atleast_1d(np.asarray(x, dtype=np.float64)))
        buf_y.append(float(y))
        if len(buf_y) >= cs:
            acc.update(np.vstack(buf_x), np.asarray(buf_y))
            buf_x.clear()
            buf_y.clear()
    if buf_y:
        acc.update(np.vstack(buf_x), np.asarray(buf_y))
    return acc.finalize()


def sufficient_stats_chunks(grid: Grid, scheme, chunks: Iterable, num_probes: int = 0,
                            probe_seed: int = 0, row_offset: int = 0) -> SufficientStats:
    """Like :func:`sufficient_stats` for a stream of ``(X_chunk, y_chunk)`` arrays."""
    acc = StatsAccumulator(grid, scheme, num_probes, probe_seed, row_offset)
    for X, y in chunks:
        acc.update(X, y)
    return acc.finalize()


def stats_from_arrays(grid: Grid, X, y, scheme="cubic", num_probes: int = 0,
                      probe_seed: int = 0) -> SufficientStats:
    acc = StatsAccumulator(grid, scheme, num_probes, probe_seed)
    acc.update(X, y)
    return acc.finalize()


def wtw_matvec(stats, v) -> np.ndarray:
    wtw = stats.wtw if isinstance(stats, SufficientStats) else stats
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != wtw.shape[1]:
        raise ValueError(f"expected length {wtw.shape[1]}, got {v.shape[0]}")
    return wtw @ v


def memory_footprint(obj, mode: str) -> int:
    """Scalar count: ``nnz(W) + m + n`` (SKI) or ``nnz(W^T W) + 2m`` (GSGP)."""
    mode = mode.upper()
    if mode == "SKI":
        if not isinstance(obj, InterpMatrix):
            raise TypeError("SKI footprint needs the interpolation matrix")
        return obj.nnz + obj.m + obj.n
    if mode == "GSGP":
        if not isinstance(obj, SufficientStats):
            raise TypeError("GSGP footprint needs sufficient statistics")
        return int(obj.wtw.nnz) + 2 * obj.m
    raise ValueError(f"mode must be SKI or GSGP, got {mode!r}")
