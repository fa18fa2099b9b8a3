import numpy as np
import pytest
from scipy.linalg import expm

from twoscale import coarse_grain as cg
from twoscale import macro_pde as mp
from twoscale import operators as ops
from twoscale import thermo as th

from conftest import dense_A, dense_J, dense_lift, dense_P

ANH = th.Potential(0.1, 1.0)
GAUSS = th.Potential()


@pytest.fixture(scope="module")
def gauss_table():
    return th.build_psi_k(GAUSS, 4)


@pytest.fixture(scope="module")
def anh_table():
    return th.build_psi_k(ANH, 4)


def dense_generator(n, m):
    """``-Abar (I + P A^-1 J N P^t)`` from dense matrices, on mean-zero profiles."""
    p, lift = dense_P(n, m), dense_lift(n, m)
    pinv = np.linalg.pinv(dense_A(n))
    abar = np.linalg.pinv(p @ pinv @ lift)
    ups = p @ pinv @ dense_J(n) @ lift
    return -abar @ (np.eye(m) + ups)


def test_macro_rhs_constant_and_tangent(anh_table):
    s = cg.BlockScheme(32, 8)
    np.testing.assert_allclose(mp.macro_rhs(np.full(8, 0.3), anh_table, s), 0.0, atol=1e-10)
    eta = np.random.default_rng(0).uniform(-1, 1, 8)
    assert abs(mp.macro_rhs(eta, anh_table, s).sum()) < 1e-9


def test_macro_rhs_gaussian_eigenmode(gauss_table):
    n, m = 32, 8
    s = cg.BlockScheme(n, m)
    gen = dense_generator(n, m)
    w, v = np.linalg.eig(gen)
    for i in np.argsort(np.abs(w))[1:4]:  # skip the constant mode
        mode = v[:, i]
        out = mp.macro_rhs(mode.real, gauss_table, s) + 1j * mp.macro_rhs(mode.imag, gauss_table, s)
        np.testing.assert_allclose(out, w[i] * mode, atol=1e-7 * abs(w[i]))


def test_macro_jacobian_finite_difference(anh_table):
    s = cg.BlockScheme(32, 8)
    eta = 0.4 * np.cos(2 * np.pi * np.arange(8) / 8)
    jac = mp.macro_jacobian(eta, anh_table, s)
    h = 1e-6
    fd = np.column_stack([(mp.macro_rhs(eta + h * e, anh_table, s) - mp.macro_rhs(eta - h * e, anh_table, s)) / (2 * h) for e in np.eye(8)])
    np.testing.assert_allclose(jac, fd, atol=1e-5 * np.abs(jac).max())


def test_integrate_macro_constant(anh_table):
    s = cg.BlockScheme(32, 8)
    traj = mp.integrate_macro(np.full(8, -0.2), 0.05, anh_table, s)
    np.testing.assert_allclose(traj.profiles, -0.2, atol=1e-12)


def test_integrate_macro_gaussian_matches_dense_propagator(gauss_table):
    n, m = 32, 8
    s = cg.BlockScheme(n, m)
    eta0 = np.cos(2 * np.pi * np.arange(m) / m) + 0.3 * np.sin(4 * np.pi * np.arange(m) / m)
    t = np.array([0.0, 0.005, 0.02])
    traj = mp.integrate_macro(eta0, 0.02, gauss_table, s, t_eval=t)
    for ti, prof in zip(t, traj.profiles):
        exact = expm(ti * dense_generator(n, m)) @ eta0
        np.testing.assert_allclose(prof, exact, atol=1e-6 * np.abs(eta0).max())
    np.testing.assert_allclose(mp.gaussian_macro_propagator(s, 0.02) @ eta0, expm(0.02 * dense_generator(n, m)) @ eta0, atol=1e-10)


def test_integrate_macro_tolerance_halving(anh_table):
    s = cg.BlockScheme(32, 8)
    eta0 = 0.5 * np.cos(2 * np.pi * (np.arange(8) + 0.5) / 8)
    a = mp.integrate_macro(eta0, 0.05, anh_table, s, rtol=1e-8).profiles[-1]
    b = mp.integrate_macro(eta0, 0.05, anh_table, s, rtol=5e-9).profiles[-1]
    assert np.max(np.abs(a - b)) <= 10 * 1e-8 * max(1.0, np.abs(a).max())


def test_energy_bound_holds(anh_table):
    s = cg.BlockScheme(32, 8)
    eta0 = 0.8 * np.cos(2 * np.pi * (np.arange(8) + 0.5) / 8)
    traj = mp.integrate_macro(eta0, 0.1, anh_table, s, t_eval=np.linspace(0, 0.1, 11))
    assert traj.energy_bound_ok
    assert np.all(np.diff(traj.energies) <= 1e-12)  # decays in practice
    np.testing.assert_allclose(traj.profiles.mean(axis=1), eta0.mean(), atol=1e-12)


def test_pde_rhs_structural_identity():
    m = 24
    z = np.random.default_rng(1).standard_normal(m)
    flux = mp.LinearFlux()
    lattice = -(ops.apply_A(z) + ops.apply_J(z))
    np.testing.assert_allclose(mp.pde_rhs(z, flux, mp.LATTICE_TRANSPORT), lattice, atol=1e-9)
    np.testing.assert_allclose(mp.pde_rhs(z, flux, 1), -(ops.apply_A(z) - ops.apply_J(z)), atol=1e-9)
    assert abs(mp.pde_rhs(z, flux).sum()) < 1e-9
    np.testing.assert_allclose(mp.pde_rhs(np.full(m, 0.4), flux), 0.0, atol=1e-12)


@pytest.mark.parametrize("m", [64, 128, 256])
def test_pde_rhs_second_order(m):
    th_ = mp.pde_nodes(m)
    got = mp.pde_rhs(np.cos(2 * np.pi * th_), mp.LinearFlux())
    exact = -4 * np.pi ** 2 * np.cos(2 * np.pi * th_) - 2 * np.pi * np.sin(2 * np.pi * th_)
    err = np.max(np.abs(got - exact))
    assert err <= 4 * np.pi ** 4 / 3 / m ** 2 + 4 * np.pi ** 3 / 3 / m ** 2


def test_gaussian_exact_pde():
    m = 64
    th_ = mp.pde_nodes(m)
    z0 = np.cos(2 * np.pi * th_) + 0.25
    np.testing.assert_allclose(mp.gaussian_exact_pde(z0, 0.0), z0, atol=1e-14)
    zt = mp.gaussian_exact_pde(z0, 0.05)
    amp = np.exp(-4 * np.pi ** 2 * 0.05)
    assert amp == pytest.approx(0.13891, abs=1e-5)
    np.testing.assert_allclose(zt, amp * np.cos(2 * np.pi * (th_ + 0.05)) + 0.25, atol=1e-13)
    assert zt.mean() == pytest.approx(0.25, abs=1e-15)
    back = mp.gaussian_exact_pde(z0, 0.05, sign=-1)
    np.testing.assert_allclose(back, amp * np.cos(2 * np.pi * (th_ - 0.05)) + 0.25, atol=1e-13)


def test_solve_pde_constant_and_mass():
    m = 32
    sol = mp.solve_pde(np.full(m, 0.7), 0.01, mp.LinearFlux())
    np.testing.assert_allclose(sol.values, 0.7, atol=1e-14)
    z0 = 0.5 * np.cos(2 * np.pi * mp.pde_nodes(m)) + 0.1 * np.sin(6 * np.pi * mp.pde_nodes(m)) + 0.2
    sol = mp.solve_pde(z0, 0.02, th.build_cramer_table(ANH), t_eval=np.linspace(0, 0.02, 5))
    assert np.max(np.abs(sol.mass() - z0.mean())) <= 1e-13


def test_solve_pde_convergence_ratio():
    errs = []
    for m in (64, 128):
        th_ = mp.pde_nodes(m)
        sol = mp.solve_pde(np.cos(2 * np.pi * th_), 0.05, mp.LinearFlux())
        exact = np.exp(-4 * np.pi ** 2 * 0.05) * np.cos(2 * np.pi * (th_ + 0.05))
        errs.append(np.sqrt(np.mean((sol.values[-1] - exact) ** 2)))
    assert errs[0] / errs[1] == pytest.approx(4, rel=0.1)


def test_solve_pde_anharmonic_matches_refinement():
    flux = th.build_cramer_table(ANH)
    prof = lambda t: 0.6 * np.cos(2 * np.pi * t)
    coarse = mp.solve_pde(cg.block_averages(prof, 64), 0.02, flux).values[-1]
    fine = mp.solve_pde(cg.block_averages(prof, 128), 0.02, flux).values[-1]
    fine_on_coarse = fine.reshape(64, 2).mean(axis=1)
    assert np.max(np.abs(coarse - fine_on_coarse)) < 2e-3


def test_uniqueness_contraction():
    m = 64
    th_ = mp.pde_nodes(m)
    flux = mp.LinearFlux()
    t = np.linspace(0, 0.02, 5)
    a = mp.solve_pde(np.cos(2 * np.pi * th_), 0.02, flux, t_eval=t)
    rep = mp.pde_uniqueness_contraction(a, a, flux)
    np.testing.assert_array_equal(rep.gap, 0.0)
    b = mp.solve_pde(np.cos(2 * np.pi * th_) + 0.3 * np.sin(4 * np.pi * th_), 0.02, flux, t_eval=t)
    rep = mp.pde_uniqueness_contraction(a, b, flux)
    assert rep.ok and rep.rate == pytest.approx(1.0)
    # the difference is the single mode k = 2; one IMEX step scales its amplitude by
    # |1 + i dt m sin(2 pi k/m)| / (1 + dt 4 m^2 sin^2(pi k/m))
    lam = 4 * m * m * np.sin(2 * np.pi / m) ** 2
    adv = m * np.sin(4 * np.pi / m)
    g = np.abs(1 + 1j * a.dt * adv) / (1 + a.dt * lam)
    steps = np.round(t / a.dt)
    np.testing.assert_allclose(rep.gap, rep.gap[0] * g ** (2 * steps), rtol=1e-9)
    cram = th.build_cramer_table(ANH)
    c = mp.solve_pde(0.8 * np.cos(2 * np.pi * th_), 0.02, cram, t_eval=t)
    d = mp.solve_pde(0.8 * np.cos(2 * np.pi * th_) + 0.2 * np.cos(6 * np.pi * th_), 0.02, cram, t_eval=t)
    rep = mp.pde_uniqueness_contraction(c, d, cram)
    assert rep.ok and rep.rate > 0.9
    with pytest.raises(ValueError):
        mp.pde_uniqueness_contraction(a, mp.solve_pde(np.cos(2 * np.pi * th_) + 1, 0.02, flux, t_eval=t), flux)
