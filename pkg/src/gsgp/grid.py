"""Regular inducing-point grids and the multilevel Toeplitz kernel operator.

Grid points are flattened row-major (last dimension fastest) everywhere in the
package; :meth:`Grid.ravel_index` is the single source of that convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

from .kernels import KernelSpec, kernel_generator_tensor, kernel_matrix

KG_DENSE_CAP = 8192


@dataclass(frozen=True)
class Grid:
    """Axis-aligned lattice with ``sizes[i]`` points spanning ``[lower[i], upper[i]]``.

    A dimension of size 1 holds a single point at ``lower`` (which must then
    equal ``upper``).
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    sizes: tuple[int, ...]

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        sizes = tuple(int(v) for v in np.atleast_1d(self.sizes))
        if not (len(lower) == len(upper) == len(sizes)) or not sizes:
            raise ValueError("lower, upper and sizes must have the same nonzero length")
        for lo, hi, n in zip(lower, upper, sizes):
            if n < 1:
                raise ValueError(f"grid size must be >= 1, got {n}")
            if n == 1 and lo != hi:
                raise ValueError("a size-1 dimension needs lower == upper")
            if n > 1 and not hi > lo:
                raise ValueError(f"need upper > lower, got [{lo}, {hi}]")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def uniform(cls, lower, upper, size, d: int = 1) -> "Grid":
        return cls((lower,) * d, (upper,) * d, (size,) * d)

    @classmethod
    def from_axes(cls, axes) -> "Grid":
        """Build from explicit 1-d coordinate arrays, rejecting non-uniform spacing."""
        lower, upper, sizes = [], [], []
        for ax in axes:
            ax = np.asarray(ax, dtype=np.float64)
            if ax.size > 2:
                steps = np.diff(ax)
                if not np.allclose(steps, steps[0], rtol=1e-10, atol=0):
                    raise ValueError("grid axes must be uniformly spaced")
            lower.append(ax[0])
            upper.append(ax[-1])
            sizes.append(ax.size)
        return cls(tuple(lower), tuple(upper), tuple(sizes))

    @property
    def ndim(self) -> int:
        return len(self.sizes)

    @property
    def m(self) -> int:
        return int(np.prod(self.sizes))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.sizes

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(
            (hi - lo) / (n - 1) if n > 1 else 0.0
            for lo, hi, n in zip(self.lower, self.upper, self.sizes)
        )

    @property
    def strides(self) -> np.ndarray:
        """Flat-index stride per dimension (row-major)."""
        return np.array([int(np.prod(self.sizes[i + 1:])) for i in range(self.ndim)], dtype=np.int64)

    def axes(self) -> list[np.ndarray]:
        return [lo + np.arange(n) * s for lo, n, s in zip(self.lower, self.sizes, self.spacing)]

    def points(self) -> np.ndarray:
        """All grid points as an ``(m, d)`` array in flat-index order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def ravel_index(self, multi) -> np.ndarray:
        return np.asarray(multi, dtype=np.int64) @ self.strides

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "sizes": list(self.sizes)}

    @classmethod
    def from_dict(cls, cfg: dict) -> "Grid":
        return cls(tuple(cfg["lower"]), tuple(cfg["upper"]), tuple(cfg["sizes"]))


def stencil_radius(scheme) -> int:
    from .interp import Scheme

    return Scheme(scheme).radius


def fit_grid(X, sizes, scheme="cubic") -> Grid:
    """Grid of the given size covering the bounding box of ``X``.

    The box is padded by ``r`` cells per side (r=1 linear, r=2 cubic) so every
    data point has a complete interpolation stencil.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    d = X.shape[1]
    sizes = np.broadcast_to(np.atleast_1d(sizes), (d,)).astype(int)
    r = stencil_radius(scheme)
    lo, hi = X.min(axis=0), X.max(axis=0)
    lower, upper = [], []
    for i in range(d):
        inner = sizes[i] - 1 - 2 * r
        if inner < 1:
            raise ValueError(f"grid size {sizes[i]} too small for padding of {r} cells per side")
        width = hi[i] - lo[i]
        if width <= 0:
            width = 1.0
        s = width / inner
        lower.append(lo[i] - r * s)
        upper.append(lo[i] - r * s + (sizes[i] - 1) * s)
    return Grid(tuple(lower), tuple(upper), tuple(sizes))


class ToeplitzOperator:
    """Implicit ``K_G`` for a stationary kernel on a regular grid.

    The generator tensor is embedded in a multilevel circulant of size
    ``>= 2 m_i - 1`` per dimension, whose spectrum is precomputed; each product
    is one real forward FFT, a pointwise multiply and one inverse FFT.
    Instances are immutable, so concurrent matvecs are safe.
    """

    def __init__(self, grid: Grid, spec: KernelSpec, noise_var: float | None = None):
        self.grid = grid
        self.spec = spec
        self.noise_var = spec.noise_var if noise_var is None else float(noise_var)
        self.shape_grid = grid.sizes
        self.m = grid.m
        gen = kernel_generator_tensor(spec, grid)
        self.generator = gen
        self.fft_shape = tuple(scipy.fft.next_fast_len(2 * n - 1, real=True) for n in grid.sizes)
        emb = np.zeros(self.fft_shape)
        # Even extension in every axis: SE is symmetric in each displacement
        # coordinate separately.
        src = gen
        for axis, n in enumerate(grid.sizes):
            L = self.fft_shape[axis]
            idx = np.concatenate([np.arange(n), np.zeros(L - 2 * n + 1, dtype=int), np.arange(n - 1, 0, -1)])
            keep = np.concatenate([np.ones(n, bool), np.zeros(L - 2 * n + 1, bool), np.ones(n - 1, bool)])
            src = np.take(src, idx, axis=axis)
            mask_shape = [1] * src.ndim
            mask_shape[axis] = L
            src = src * keep.reshape(mask_shape)
        emb[...] = src
        self.spectrum = scipy.fft.rfftn(emb)
        self.spectrum.setflags(write=False)
        self.shape = (self.m, self.m)
        self.dtype = np.dtype(np.float64)

    def matvec(self, v) -> np.ndarray:
        """``K_G v`` for ``v`` of shape ``(m,)`` or ``(m, k)``."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.m or v.ndim > 2:
            raise ValueError(f"expected leading dimension {self.m}, got shape {v.shape}")
        d = len(self.shape_grid)
        axes = tuple(range(d))
        crop = tuple(slice(0, n) for n in self.shape_grid)
        if v.ndim == 2:
            k = v.shape[1]
            if k == 0:
                return v.copy()
            x = v.reshape(self.shape_grid + (k,))
            fx = scipy.fft.rfftn(x, s=self.fft_shape, axes=axes)
            fx *= self.spectrum[..., None]
            y = scipy.fft.irfftn(fx, s=self.fft_shape, axes=axes)
            return np.ascontiguousarray(y[crop]).reshape(self.m, k)
        x = v.reshape(self.shape_grid)
        fx = scipy.fft.rfftn(x, s=self.fft_shape)
        fx *= self.spectrum
        y = scipy.fft.irfftn(fx, s=self.fft_shape)
        return np.ascontiguousarray(y[crop]).ravel()

    __matmul__ = matvec

    def column(self, j: int) -> np.ndarray:
        e = np.zeros(self.m)
        e[j] = 1.0
        return self.matvec(e)


def build_toeplitz_operator(grid: Grid, spec: KernelSpec) -> ToeplitzOperator:
    return ToeplitzOperator(grid, spec)


def kg_matvec(op: ToeplitzOperator, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != op.m:
        raise ValueError(f"expected vector of length {op.m}, got shape {v.shape}")
    return op.matvec(v)


def kg_dense(grid: Grid, spec: KernelSpec, cap: int = KG_DENSE_CAP) -> np.ndarray:
    """Explicit ``[k(g_i, g_j)]`` for testing; refuses grids with ``m > cap``."""
    if grid.m > cap:
        raise ValueError(f"grid has m={grid.m} points, dense cap is {cap}")
    P = grid.points()
    return kernel_matrix(spec, P)
