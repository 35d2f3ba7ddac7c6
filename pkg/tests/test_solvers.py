import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsgp.grid import Grid, ToeplitzOperator
from gsgp.interp import stats_from_arrays
from gsgp.kernels import se_kernel
from gsgp.solvers import (FactorizedBasis, NotSPDError, SkiOperator, cg, efcg, efcg_simplified, efla,
                          factorized_inner, factorized_update, fcg, fla, lanczos, symmetric_gsgp_solve)


def test_ski_operator_matches_dense(rng, make_instance):
    inst = make_instance(rng, 80, (6, 6), "cubic")
    A = inst.ski_dense()
    v = rng.standard_normal(80)
    ref = A @ v
    assert np.linalg.norm(inst.op.apply(v) - ref) <= 1e-10 * np.linalg.norm(ref)
    np.testing.assert_allclose(inst.op.dense(), A, atol=1e-12)


# -- factorized building blocks ---------------------------------------------

def test_basis_precomputations(rng, make_instance):
    inst = make_instance(rng, 100, (16,), "cubic")
    z0 = rng.standard_normal(100)
    b = FactorizedBasis.from_vector(inst.op, z0)
    np.testing.assert_allclose(b.wt_z0, inst.Wd.T @ z0, atol=1e-12)
    np.testing.assert_allclose(b.kg_wt_z0, inst.KG @ inst.Wd.T @ z0, atol=1e-12)
    assert b.z0_sq == pytest.approx(z0 @ z0, rel=1e-14)


def test_factorized_update_cases(rng, make_instance):
    inst = make_instance(rng, 100, (16,), "cubic")
    op = inst.op
    z0 = rng.standard_normal(100)
    basis = FactorizedBasis.from_vector(op, z0)
    zh, c = factorized_update(op, basis, np.zeros(16), 1.0)
    np.testing.assert_allclose(zh, basis.kg_wt_z0)
    assert c == inst.s2
    v = rng.standard_normal(16)
    zh, c = factorized_update(op, basis, v, 0.0)
    np.testing.assert_allclose(zh, inst.gsgp_dense() @ v, atol=1e-12)
    assert c == 0
    c0 = rng.standard_normal()
    zh, c = factorized_update(op, basis, v, c0)
    lhs = inst.Wd @ zh + c * z0
    rhs = inst.ski_dense() @ (inst.Wd @ v + c0 * z0)
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(rhs)
    with pytest.raises(ValueError):
        factorized_update(op, basis, np.ones(3), 1.0)


def test_factorized_inner(rng, make_instance):
    inst = make_instance(rng, 100, (16,), "cubic")
    z0, y0 = rng.standard_normal((2, 100))
    wz, wy = inst.Wd.T @ z0, inst.Wd.T @ y0
    yz = float(y0 @ z0)
    assert factorized_inner(inst.stats, (np.zeros(16), 1.0), (np.zeros(16), 1.0), wz, wz, z0 @ z0) == \
        pytest.approx(z0 @ z0)
    a, b = rng.standard_normal((2, 16))
    assert factorized_inner(inst.stats, (a, 0.0), (b, 0.0), wz, wy, yz) == \
        pytest.approx(a @ inst.stats.wtw @ b, rel=1e-12)
    c, d = rng.standard_normal(2)
    ref = (inst.Wd @ a + c * z0) @ (inst.Wd @ b + d * y0)
    assert factorized_inner(inst.op, (a, c), (b, d), wz, wy, yz) == pytest.approx(ref, rel=1e-12, abs=1e-12)
    with pytest.raises(ValueError):
        factorized_inner(inst.stats, (a, c), (np.ones(3), d), wz, wy, yz)


# -- CG family ---------------------------------------------------------------

def test_cg_scaled_identity(rng):
    b = rng.standard_normal(20)
    res = cg(0.3 * np.eye(20), b, tol=1e-12)
    assert res.iters == 1
    np.testing.assert_allclose(res.x, b / 0.3, rtol=1e-14)


def test_cg_zero_rhs():
    res = cg(np.eye(5), np.zeros(5))
    assert res.iters == 0 and res.converged and not res.x.any()


def test_cg_dense_solve(rng, make_instance):
    inst = make_instance(rng, 64, (16,), "cubic")
    A = inst.ski_dense()
    res = cg(inst.op, inst.y, tol=1e-10)
    ref = np.linalg.solve(A, inst.y)
    assert np.linalg.norm(res.x - ref) <= 1e-6 * np.linalg.norm(ref)
    assert res.residual_sq <= res.eps
    r = np.sqrt(res.residuals)
    assert np.all(r[1:] <= 1.1 * r[:-1]) or r[-1] ** 2 <= res.eps


def test_cg_not_spd():
    A = np.diag([1.0, -2.0, 3.0])
    with pytest.raises(NotSPDError):
        cg(A, np.ones(3), tol=1e-12)


def test_fcg_matches_cg(rng, make_instance):
    inst = make_instance(rng, 150, (24,), "cubic", lengthscale=0.6, noise_std=0.5)
    ref = cg(inst.op, inst.y, tol=0.01)
    res = fcg(inst.op, inst.y, tol=0.01)
    assert res.iters == ref.iters
    assert np.linalg.norm(res.x - ref.x) <= 1e-8 * np.linalg.norm(ref.x)
    np.testing.assert_allclose(res.wtx, inst.Wd.T @ res.x, rtol=1e-9, atol=1e-9)


def test_fcg_reconstructed_residuals_match_cg(rng, make_instance):
    inst = make_instance(rng, 120, (20,), "linear", lengthscale=0.6, noise_std=0.5)
    cg_r, fcg_r = [], []
    cg(inst.op, inst.y, tol=0.01, callback=lambda k, s: cg_r.append(s["r"].copy()))
    fcg(inst.op, inst.y, tol=0.01,
        callback=lambda k, s: fcg_r.append(inst.Wd @ s["rhat"] + s["cr"] * s["r0"]))
    assert len(cg_r) == len(fcg_r)
    for a, b in zip(cg_r, fcg_r):
        assert np.linalg.norm(a - b) <= 1e-8 * np.linalg.norm(inst.y)


def test_fcg_exact_start(rng, make_instance):
    inst = make_instance(rng, 60, (12,), "cubic")
    x = np.linalg.solve(inst.ski_dense(), inst.y)
    res = fcg(inst.op, inst.y, x0=x, tol=1e-6)
    assert res.iters == 0


def test_efcg_matches_fcg_scalars_and_budget(rng, make_instance):
    # CG recurrences amplify rounding on long spectral tails, so compare
    # step by step only on a well-conditioned instance
    inst = make_instance(rng, 200, (10, 10), "cubic", lengthscale=0.6, noise_std=0.5)
    a = fcg(inst.op, inst.y, tol=0.01)
    inst.op.reset_counts()
    b = efcg(inst.op, inst.y, tol=0.01)
    assert a.iters == b.iters
    np.testing.assert_allclose(b.alphas, a.alphas, rtol=1e-10)
    np.testing.assert_allclose(b.betas, a.betas, rtol=1e-10)
    assert b.loop_matvecs == {"kg": b.iters, "wtw": b.iters}
    ref = np.linalg.solve(inst.ski_dense(), inst.y)
    assert np.linalg.norm(b.x - ref) <= 0.05 * np.linalg.norm(ref)


def test_factorized_loops_never_touch_w(rng, make_instance):
    inst = make_instance(rng, 100, (16,), "cubic")
    for solver in (fcg, efcg):
        res = solver(inst.op, inst.y, tol=1e-8)
        assert "w" not in res.loop_matvecs and "wt" not in res.loop_matvecs


def test_efcg_with_initial_guess(rng, make_instance):
    inst = make_instance(rng, 90, (14,), "linear")
    x0 = rng.standard_normal(90)
    res = efcg(inst.op, inst.y, x0=x0, tol=1e-10)
    ref = np.linalg.solve(inst.ski_dense(), inst.y)
    assert np.linalg.norm(res.x - ref) <= 1e-7 * np.linalg.norm(ref)


def test_efcg_simplified_mean_setup(rng, make_instance):
    inst = make_instance(rng, 200, (32,), "cubic")
    op = SkiOperator.from_stats(inst.kg, inst.stats)
    s2 = inst.s2
    res = efcg_simplified(op, -inst.kg.matvec(inst.stats.wty) / s2, tol=1e-10, rhs_norm_sq=inst.stats.yty)
    ref = inst.Wd.T @ np.linalg.solve(inst.ski_dense(), inst.y)
    got = res.wtx + inst.stats.wty / s2
    assert np.linalg.norm(got - ref) <= 1e-6 * np.linalg.norm(ref)
    assert res.loop_matvecs == {"kg": res.iters, "wtw": res.iters}


def test_efcg_simplified_zero_and_cov_setup(rng, make_instance):
    inst = make_instance(rng, 200, (32,), "cubic")
    op = SkiOperator.from_stats(inst.kg, inst.stats)
    res = efcg_simplified(op, np.zeros(32))
    assert res.iters == 0 and not res.wtx.any()
    yh = rng.standard_normal(32)
    res = efcg_simplified(op, yh, tol=1e-12)
    ref = inst.Wd.T @ np.linalg.solve(inst.ski_dense(), inst.Wd @ yh)
    assert np.linalg.norm(res.wtx - ref) <= 1e-8 * np.linalg.norm(ref)


def test_symmetric_solve(rng, make_instance):
    # short lengthscale keeps K_G well conditioned
    inst = make_instance(rng, 100, (16,), "cubic", lengthscale=0.5, noise_std=0.5)
    op = SkiOperator.from_stats(inst.kg, inst.stats)
    rhs = inst.KG @ rng.standard_normal(16)
    res = symmetric_gsgp_solve(op, rhs, tol=1e-12)
    ref = np.linalg.solve(inst.gsgp_dense(), rhs)
    assert np.linalg.norm(res.x - ref) <= 1e-6 * np.linalg.norm(ref)
    assert res.iters > 0


def test_symmetric_solve_without_data():
    g = Grid((0.0,), (15.0,), (16,))
    kg = ToeplitzOperator(g, se_kernel(0.5, 1.0), noise_var=0.2)
    empty = stats_from_arrays(g, np.zeros((0, 1)), np.zeros(0), "cubic")
    op = SkiOperator.from_stats(kg, empty)
    rhs = np.arange(16.0)
    res = symmetric_gsgp_solve(op, rhs, tol=1e-12)
    np.testing.assert_allclose(res.x, rhs / 0.2, rtol=1e-8, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fcg_cg_equivalence_property(seed):
    from conftest import Instance
    rng = np.random.default_rng(seed)
    inst = Instance(rng, int(rng.integers(30, 200)), (int(rng.integers(8, 40)),),
                    str(rng.choice(["linear", "cubic"])),
                    noise_std=rng.uniform(0.3, 1.0), lengthscale=rng.uniform(0.3, 0.8))
    a = cg(inst.op, inst.y, tol=0.01)
    b = fcg(inst.op, inst.y, tol=0.01)
    assert a.iters == b.iters
    assert np.linalg.norm(a.x - b.x) <= 1e-8 * np.linalg.norm(a.x)


# -- Lanczos family ----------------------------------------------------------

def test_lanczos_diag_start_e1():
    fac = lanczos(np.diag([2.0, 3.0, 5.0]), np.array([1.0, 0, 0]), 3)
    assert fac.k == 1 and fac.alpha.tolist() == [2.0]


def test_lanczos_scaled_identity(rng):
    fac = lanczos(4.0 * np.eye(10), rng.standard_normal(10), 5)
    assert fac.k == 1 and fac.alpha[0] == pytest.approx(4.0) and fac.breakdown


def test_lanczos_full_spectrum(rng):
    B = rng.standard_normal((16, 16))
    A = B @ B.T + np.eye(16)
    fac = lanczos(A, rng.standard_normal(16), 16)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(fac.T())), np.linalg.eigvalsh(A), rtol=1e-8)
    Q = fac.Q
    np.testing.assert_allclose(Q.T @ Q, np.eye(16), atol=1e-8)
    assert np.linalg.norm(Q @ fac.T() @ Q.T - A) <= 1e-6 * np.linalg.norm(A)
    assert np.all(fac.beta >= 0)


def test_fla_matches_lanczos(rng, make_instance):
    inst = make_instance(rng, 150, (8, 8), "cubic")
    b = rng.standard_normal(150)
    la = lanczos(inst.op, b, 10)
    fl = fla(inst.op, b, 10)
    np.testing.assert_allclose(fl.alpha, la.alpha, atol=1e-8)
    np.testing.assert_allclose(fl.beta, la.beta, atol=1e-8)
    Q = fl.basis(inst.W, b)
    np.testing.assert_allclose(Q[:, 0], b / np.linalg.norm(b), atol=1e-14)
    np.testing.assert_allclose(Q.T @ Q, np.eye(10), atol=1e-8)
    np.testing.assert_allclose(np.abs(Q), np.abs(la.Q), atol=1e-8)


def test_efla_matches_fla_and_budget(rng, make_instance):
    inst = make_instance(rng, 150, (8, 8), "cubic")
    b = rng.standard_normal(150)
    fl = fla(inst.op, b, 12)
    wtb = inst.Wd.T @ b
    op = SkiOperator.from_stats(inst.kg, inst.stats)
    ef = efla(op, wtb=wtb, b_sq=b @ b, k=12)
    np.testing.assert_allclose(ef.alpha, fl.alpha, atol=1e-10)
    np.testing.assert_allclose(ef.beta, fl.beta, atol=1e-10)
    assert ef.loop_matvecs == {"kg": ef.k - 1, "wtw": ef.k - 1}
    np.testing.assert_allclose(ef.Phat, inst.stats.wtw @ ef.Qhat, atol=1e-10)


def test_efla_single_step_rayleigh(rng, make_instance):
    inst = make_instance(rng, 70, (12,), "linear")
    b = rng.standard_normal(70)
    op = SkiOperator.from_stats(inst.kg, inst.stats)
    ef = efla(op, wtb=inst.Wd.T @ b, b_sq=b @ b, k=1)
    assert ef.alpha[0] == pytest.approx(b @ inst.ski_dense() @ b / (b @ b), rel=1e-12)


def test_efla_stops_when_factorized_norm_cancels():
    # dense low-noise data: the Krylov space from 1_n closes before k = m and
    # the factorized norm of the next residual is pure rounding
    from gsgp.bench import SyntheticSpec, gen_sine
    from gsgp.grid import fit_grid
    from gsgp.interp import stats_from_arrays
    from gsgp.kernels import preset
    X, y = gen_sine(SyntheticSpec(2000, seed=2))
    grid = fit_grid(X, (32,), "cubic")
    stats = stats_from_arrays(grid, X, y, "cubic")
    op = SkiOperator.from_stats(ToeplitzOperator(grid, preset("sine", 1)), stats)
    fac = efla(op, k=32, wtb=stats.wt1, b_sq=float(stats.n))
    assert fac.breakdown and fac.k < 32
    assert np.linalg.eigvalsh(fac.T()).min() >= 0.99 * op.noise_var
