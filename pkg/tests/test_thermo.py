import numpy as np
import pytest
from mpmath import mp, quad as mpquad, exp as mpexp, cos as mpcos, log as mplog
from scipy import integrate

from twoscale import coarse_grain as cg
from twoscale import thermo as th
from twoscale.errors import TableRangeError

ANH = th.Potential(0.1, 1.0)
GAUSS = th.Potential()


def test_potential_validation_and_derivatives():
    with pytest.raises(ValueError):
        th.Potential(1.0, 1.0)
    p = th.Potential(0.3, 1.5)
    x = np.linspace(-3, 3, 11)
    h = 1e-5
    np.testing.assert_allclose(p.dpsi(x), (p.psi(x + h) - p.psi(x - h)) / (2 * h), atol=1e-8)
    np.testing.assert_allclose(p.d2psi(x), (p.dpsi(x + h) - p.dpsi(x - h)) / (2 * h), atol=1e-8)
    assert p.perturbation_norms == pytest.approx((0.3, 0.45, 0.675))
    assert p.max_curvature == pytest.approx(1.675)


def _mp_log_partition(sigma, a, b):
    mp.dps = 30
    f = lambda x: mpexp(sigma * x - x * x / 2 - a * mpcos(b * x))
    return float(mplog(mpquad(f, [-40 + sigma, sigma, 40 + sigma])))


@pytest.mark.parametrize("sigma", [-2.0, -0.3, 0.0, 1.1, 3.0])
def test_log_partition_against_high_precision(sigma):
    assert th.log_partition(sigma, GAUSS) == pytest.approx(0.5 * sigma ** 2 + 0.5 * np.log(2 * np.pi), abs=1e-12)
    assert th.log_partition(sigma, ANH) == pytest.approx(_mp_log_partition(sigma, 0.1, 1.0), abs=1e-11)


def test_tilted_stats_consistent_with_quadrature():
    s = np.array([-1.5, 0.0, 0.7, 2.5])
    log_z, mean, var = th.tilted_stats(s, ANH)
    quad = np.array([th.log_partition(v, ANH) for v in s])
    np.testing.assert_allclose(log_z, quad, atol=1e-12)
    h = 1e-4
    d1 = (np.array([th.log_partition(v + h, ANH) for v in s]) - np.array([th.log_partition(v - h, ANH) for v in s])) / (2 * h)
    np.testing.assert_allclose(mean, d1, atol=1e-7)
    assert np.all(var > 0)


def test_cramer_gaussian_closed_form():
    m = np.linspace(-2, 2, 41)
    phi, dphi, d2phi = th.cramer(m, GAUSS)
    np.testing.assert_allclose(dphi, m, atol=1e-10)
    np.testing.assert_allclose(phi, 0.5 * m * m - 0.5 * np.log(2 * np.pi), atol=1e-10)
    np.testing.assert_allclose(d2phi, 1.0, atol=1e-10)


@pytest.mark.parametrize("m", [-2.0, -0.5, 0.0, 0.8, 2.0])
def test_cramer_duality_by_brute_force(m):
    phi, dphi, _ = th.cramer(np.array(m), ANH)
    # the supremum over s of s m - log Z(s) is attained at dphi, and equals phi
    s = dphi + np.linspace(-0.05, 0.05, 21)
    vals = np.array([v * m - th.log_partition(v, ANH) for v in s])
    assert vals.max() == pytest.approx(float(phi), abs=1e-10)
    assert np.argmax(vals) == 10
    # tilted mean at the optimizer reproduces m
    assert th.tilted_mean(dphi, ANH) == pytest.approx(m, abs=1e-12)


def test_cramer_table_interpolation():
    table = th.build_cramer_table(ANH, m_max=2.5)
    z = np.array([-1.234, 0.0101, 2.2])
    _, dphi, d2phi = th.cramer(z, ANH)
    np.testing.assert_allclose(table.dphi(z), dphi, atol=1e-9)
    np.testing.assert_allclose(table.d2phi(z), d2phi, atol=1e-6)
    with pytest.raises(TableRangeError):
        table.dphi(3.0)


@pytest.mark.parametrize("k", [4, 16])
def test_psi_k_gaussian_is_exactly_quadratic(k):
    table = th.build_psi_k(GAUSS, k)
    np.testing.assert_allclose(table.d2f, 1.0, atol=1e-6)
    np.testing.assert_allclose(table.df, table.m, atol=1e-9)
    assert table.mass_defect <= 1e-10


def test_psi_1_is_the_single_site_potential():
    table = th.build_psi_k(ANH, 1)
    np.testing.assert_allclose(table.f, ANH.psi(table.m))
    np.testing.assert_allclose(table.d2f, ANH.d2psi(table.m))


def test_psi_2_against_direct_quadrature():
    # two sites with mean m: density of the mean is proportional to
    # int exp(-psi(m + u) - psi(m - u)) du, so psi_2 = -(1/2) log of that
    table = th.build_psi_k(ANH, 2)

    def psi2(m):
        val = integrate.quad(lambda u: np.exp(-ANH.psi(m + u) - ANH.psi(m - u)), -15, 15, epsabs=0, epsrel=1e-13)[0]
        return -0.5 * np.log(val)

    m = np.array([-1.5, -0.3, 0.4, 1.9])
    direct = np.array([psi2(v) for v in m]) - psi2(0.0)
    np.testing.assert_allclose(table.psi(m) - table.psi(0.0), direct, atol=1e-9)
    h = 1e-3
    d2 = np.array([(psi2(v + h) - 2 * psi2(v) + psi2(v - h)) / h ** 2 for v in m])
    np.testing.assert_allclose(table.d2psi(m), d2, atol=1e-5)


def test_psi_k_approaches_cramer():
    cramer = th.build_cramer_table(ANH)
    errs = []
    for k in (8, 16, 32, 64):
        t = th.build_psi_k(ANH, k)
        sel = np.abs(t.m) <= 2
        errs.append(np.max(np.abs(t.d2f[sel] - cramer.d2phi(t.m[sel]))))
    assert all(a > b for a, b in zip(errs, errs[1:]))
    # the leading correction is O(1/K)
    assert errs[0] / errs[-1] == pytest.approx(8, rel=0.1)


def test_table_serialization_roundtrip(tmp_path):
    t = th.build_psi_k(ANH, 4)
    path = tmp_path / "t.json"
    t.save(path)
    back = th.PsiKTable.load(path)
    np.testing.assert_array_equal(back.d2f, t.d2f)
    assert back.content_hash() == t.content_hash()
    cached = th.load_or_build_psi_k(ANH, 4, tmp_path / "cache")
    again = th.load_or_build_psi_k(ANH, 4, tmp_path / "cache")
    assert cached.content_hash() == again.content_hash() == t.content_hash()


def test_macro_energy_and_gradient():
    t = th.build_psi_k(ANH, 8)
    y = np.array([0.3, -0.2, 0.5, -0.6])
    g = th.macro_grad_H(y, t)
    assert abs(g.sum()) < 1e-13
    assert th.macro_energy(y, t) > 0
    assert th.macro_energy(np.full(4, 0.7), t) == pytest.approx(0.0, abs=1e-14)


def test_local_gibbs_weight_gaussian():
    s = cg.BlockScheme(12, 4)
    t = th.build_psi_k(GAUSS, 3)
    eta = np.array([0.2, -0.1, 0.4, 0.3])
    x = np.random.default_rng(1).standard_normal(12)
    expected = s.lift(eta - eta.mean()) @ x
    assert th.local_gibbs_log_weight(x, eta, t, s) == pytest.approx(expected, abs=1e-9)


def test_convexity_bounds():
    t = th.build_psi_k(ANH, 8)
    lam, big = th.convexity_bounds(t, 2.0)
    assert 0.9 < lam < 1.0 < big < 1.1
