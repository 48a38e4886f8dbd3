import numpy as np
import pytest
import scipy.special

from swinlab.grid import GAUSS, make_grid
from swinlab import spectral as sp


def random_real_coeffs(band_limit, rng, scale=1.0):
    c = sp.zeros_coeffs(band_limit)
    for ell in range(band_limit + 1):
        c.set(ell, 0, scale * rng.standard_normal())
        for m in range(1, ell + 1):
            z = scale * (rng.standard_normal() + 1j * rng.standard_normal()) / np.sqrt(2)
            c.set(ell, m, z)
            c.set(ell, -m, (-1) ** m * np.conj(z))
    return c


@pytest.fixture(scope="module")
def grid8():
    return make_grid(8, 16, GAUSS)


def test_legendre_matches_scipy(grid8):
    L = 7
    tab = sp.legendre_table(L, np.sin(grid8.latitudes))
    theta = np.pi / 2 - grid8.latitudes
    for ell in range(L + 1):
        for m in range(ell + 1):
            ref = scipy.special.sph_harm_y(ell, m, theta, 0.0).real
            np.testing.assert_allclose(tab[ell, m], ref, atol=1e-13)


def test_constant_field_projects_to_a00(grid8):
    c = sp.sht_forward(np.full((8, 16), 2.5), grid8, 7)
    assert abs(c.get(0, 0) - 2.5 * np.sqrt(4 * np.pi)) < 1e-10
    rest = c.coeffs.copy()
    rest[0, 7] = 0.0
    assert np.max(np.abs(rest)) < 1e-10


def test_y10_field_gives_unit_coefficient(grid8):
    tab = sp.legendre_table(7, np.sin(grid8.latitudes))
    field = np.broadcast_to(tab[1, 0][:, None], (8, 16)).copy()
    c = sp.sht_forward(field, grid8, 7)
    assert abs(c.get(1, 0) - 1.0) < 1e-10
    rest = c.coeffs.copy()
    rest[1, 7] = 0.0
    assert np.max(np.abs(rest)) < 1e-10


def test_round_trip_band_limited(grid8):
    rng = np.random.default_rng(7)
    c = random_real_coeffs(7, rng)
    f = sp.sht_inverse(c, grid8)
    f2 = sp.sht_inverse(sp.sht_forward(f, grid8, 7), grid8)
    assert np.max(np.abs(f2 - f)) < 1e-9


def test_round_trip_large_band_limit():
    grid = make_grid(48, 96, GAUSS)
    rng = np.random.default_rng(11)
    c = random_real_coeffs(42, rng)
    f = sp.sht_inverse(c, grid)
    c2 = sp.sht_forward(f, grid, 42)
    f2 = sp.sht_inverse(c2, grid)
    assert np.max(np.abs(f2 - f)) < 1e-9
    assert np.max(np.abs(c2.coeffs - c.coeffs)) < 1e-9


def test_inverse_trivial_cases(grid8):
    assert np.max(np.abs(sp.sht_inverse(sp.zeros_coeffs(5), grid8))) == 0.0
    c = sp.zeros_coeffs(5)
    c.set(0, 0, np.sqrt(4 * np.pi))
    np.testing.assert_allclose(sp.sht_inverse(c, grid8), 1.0, atol=1e-12)


def test_inverse_linearity(grid8):
    rng = np.random.default_rng(3)
    a = random_real_coeffs(6, rng)
    b = random_real_coeffs(6, rng)
    combo = sp.SHTCoeffs(6, 0.7 * a.coeffs + 1.3 * b.coeffs)
    lhs = sp.sht_inverse(combo, grid8)
    rhs = 0.7 * sp.sht_inverse(a, grid8) + 1.3 * sp.sht_inverse(b, grid8)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_inverse_rejects_asymmetric_coeffs(grid8):
    c = sp.zeros_coeffs(4)
    c.set(2, 1, 1.0 + 0.5j)  # missing the mirrored order
    with pytest.raises(ValueError, match="conjugate-symmetric"):
        sp.sht_inverse(c, grid8)


def test_forward_rejects_over_capacity(grid8):
    with pytest.raises(ValueError, match="capacity"):
        sp.sht_forward(np.zeros((8, 16)), grid8, 8)


def test_psd_examples(grid8):
    c = sp.sht_forward(np.full((8, 16), 3.0), grid8, 7)
    p = sp.psd(c)
    assert abs(p[0] - 4 * np.pi * 9.0) < 1e-9
    assert np.max(np.abs(p[1:])) < 1e-12

    unit = sp.zeros_coeffs(5)
    unit.set(3, 2, 1.0)
    np.testing.assert_allclose(sp.psd(unit)[3], 1.0 / 7.0, atol=1e-15)

    rng = np.random.default_rng(0)
    c = random_real_coeffs(6, rng)
    degrees = np.arange(7)
    parseval = np.sum((2 * degrees + 1) * sp.psd(c))
    assert abs(parseval - np.sum(np.abs(c.coeffs) ** 2)) < 1e-12


def test_psd_invariant_under_longitude_rotation(grid8):
    rng = np.random.default_rng(5)
    f = sp.sht_inverse(random_real_coeffs(7, rng), grid8)
    p1 = sp.psd(sp.sht_forward(f, grid8, 7))
    p2 = sp.psd(sp.sht_forward(np.roll(f, 5, axis=1), grid8, 7))
    np.testing.assert_allclose(p1, p2, atol=1e-10)


def test_coherence_examples(grid8):
    rng = np.random.default_rng(9)
    u = random_real_coeffs(6, rng)
    ones = sp.coherence(u, u)
    np.testing.assert_allclose(ones, 1.0, atol=1e-12)
    neg = sp.coherence(u, sp.SHTCoeffs(6, -u.coeffs))
    np.testing.assert_allclose(neg, -1.0, atol=1e-12)

    y10 = sp.zeros_coeffs(2)
    y10.set(1, 0, 1.0)
    y11 = sp.zeros_coeffs(2)
    y11.set(1, 1, 1.0 / np.sqrt(2))
    y11.set(1, -1, -1.0 / np.sqrt(2))
    coh = sp.coherence(y10, y11)
    assert abs(coh[1]) < 1e-15
    assert np.isnan(coh[0]) and np.isnan(coh[2])


def test_coherence_symmetric(grid8):
    rng = np.random.default_rng(13)
    u = random_real_coeffs(5, rng)
    v = random_real_coeffs(5, rng)
    np.testing.assert_array_equal(sp.coherence(u, v), sp.coherence(v, u))


def test_forward_adjoint_is_true_adjoint(grid8):
    # <forward(f), g> = <f, adjoint(g)> with the real inner product on coeffs
    rng = np.random.default_rng(21)
    f = rng.standard_normal((8, 16))
    g = rng.standard_normal((8, 15)) + 1j * rng.standard_normal((8, 15))
    a = sp.sht_forward(f, grid8, 7).coeffs
    lhs = np.sum(a.real * g.real + a.imag * g.imag)
    rhs = np.sum(f * sp.sht_forward_adjoint(g, grid8, 7))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_coeffs_csv_dump(tmp_path, grid8):
    c = sp.sht_forward(np.full((8, 16), 1.0), grid8, 3)
    path = tmp_path / "coeffs.csv"
    sp.coeffs_to_csv(c, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "ell,m,re,im"
    assert len(lines) == 1 + sum(2 * ell + 1 for ell in range(4))
