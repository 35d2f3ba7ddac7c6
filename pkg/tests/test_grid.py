import time

import numpy as np
import pytest

from gsgp.grid import Grid, ToeplitzOperator, build_toeplitz_operator, fit_grid, kg_dense, kg_matvec
from gsgp.kernels import eval_kernel, preset, se_kernel


def test_grid_coordinates_row_major():
    g = Grid((0.0, 10.0), (1.0, 12.0), (3, 2))
    P = g.points()
    assert P.shape == (6, 2)
    # last dimension fastest
    np.testing.assert_allclose(P[:3], [[0, 10], [0, 12], [0.5, 10]])
    assert g.ravel_index([2, 1]) == 5
    assert list(g.strides) == [2, 1]


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid((0.0,), (0.0,), (3,))
    with pytest.raises(ValueError):
        Grid((0.0,), (1.0,), (1,))
    with pytest.raises(ValueError):
        Grid.from_axes([np.array([0.0, 1.0, 3.0])])
    assert Grid.from_axes([np.linspace(0, 1, 5)]).sizes == (5,)


def test_smallest_toeplitz():
    spec = se_kernel(0.7, 1.3)
    g = Grid((0.0,), (0.5,), (2,))
    op = build_toeplitz_operator(g, spec)
    out = kg_matvec(op, np.array([1.0, 0.0]))
    np.testing.assert_allclose(out, [1.3, eval_kernel(spec, [0.0], [0.5])], rtol=1e-14)


@pytest.mark.parametrize("sizes", [(64,), (8, 8, 4), (5, 7), (3, 1, 6)])
def test_matvec_matches_dense(rng, sizes):
    d = len(sizes)
    spec = se_kernel(rng.uniform(0.2, 1.0, d), 1.7)
    upper = tuple(1.0 if s > 1 else 0.0 for s in sizes)
    g = Grid((0.0,) * d, upper, sizes)
    op = ToeplitzOperator(g, spec)
    K = kg_dense(g, spec)
    for _ in range(3):
        v = rng.standard_normal(g.m)
        ref = K @ v
        assert np.linalg.norm(op.matvec(v) - ref) <= 1e-10 * np.linalg.norm(ref)
    V = rng.standard_normal((g.m, 4))
    np.testing.assert_allclose(op.matvec(V), K @ V, atol=1e-12)


def test_matvec_symmetric(rng):
    g = Grid((0, 0), (1, 2), (9, 12))
    op = ToeplitzOperator(g, se_kernel([0.3, 0.8], 1.0))
    v, w = rng.standard_normal((2, g.m))
    a, b = v @ op.matvec(w), w @ op.matvec(v)
    assert abs(a - b) <= 1e-12 * abs(a)


def test_matvec_basic_vectors():
    g = Grid((0.0,), (3.0,), (4,))
    spec = se_kernel(1.2, 0.8)
    op = ToeplitzOperator(g, spec)
    K = kg_dense(g, spec)
    np.testing.assert_array_equal(kg_matvec(op, np.zeros(4)), np.zeros(4))
    np.testing.assert_allclose(kg_matvec(op, np.ones(4)), K.sum(axis=1), rtol=1e-14)
    np.testing.assert_allclose(op.column(2), K[:, 2], rtol=1e-14)
    with pytest.raises(ValueError):
        kg_matvec(op, np.ones(5))


def test_kg_dense_properties():
    g1 = Grid((0.2,), (0.2,), (1,))
    np.testing.assert_array_equal(kg_dense(g1, preset("sine")), [[1.439]])
    g = Grid((0, 0), (1, 1), (10, 10))
    K = kg_dense(g, se_kernel([0.4, 0.4], 2.0))
    np.testing.assert_array_equal(K, K.T)
    assert np.linalg.eigvalsh(K).min() >= -1e-10 * 2.0
    with pytest.raises(ValueError):
        kg_dense(Grid((0,), (1,), (9000,)), preset("sine"))


def test_fit_grid_pads_stencil(rng):
    X = rng.random((50, 2))
    g = fit_grid(X, 20, "cubic")
    s = np.array(g.spacing)
    assert np.all(np.array(g.lower) <= X.min(0) - 2 * s + 1e-12)
    assert np.all(np.array(g.upper) >= X.max(0) + 2 * s - 1e-12)


def test_matvec_subquadratic():
    spec = se_kernel(0.01, 1.0)
    sizes = [2**10, 2**12, 2**14, 2**16, 2**18]
    times = []
    for m in sizes:
        op = ToeplitzOperator(Grid((0.0,), (1.0,), (m,)), spec)
        v = np.ones(m)
        op.matvec(v)
        reps = max(3, 2**18 // m)
        t0 = time.perf_counter()
        for _ in range(reps):
            op.matvec(v)
        times.append((time.perf_counter() - t0) / reps)
    slope = np.polyfit(np.log(sizes), np.log(times), 1)[0]
    assert slope < 1.5
