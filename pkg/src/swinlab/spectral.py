"""Spherical harmonic analysis/synthesis and per-degree spectral quantities.

Convention: orthonormal complex harmonics with the Condon-Shortley phase,
so the integral of |Y_lm|^2 over the sphere is 1. All analytic values in
the tests are stated under this convention. Everything runs in float64.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .grid import GridSpec

_SYMMETRY_TOL = 1e-10


@dataclass
class SHTCoeffs:
    """Dense triangular coefficient store, column index = band_limit + m."""

    band_limit: int
    coeffs: np.ndarray  # complex128, shape (L+1, 2L+1)

    def __post_init__(self):
        L = self.band_limit
        expected = (L + 1, 2 * L + 1)
        if self.coeffs.shape != expected:
            raise ValueError(f"coeffs shape {self.coeffs.shape}, expected {expected}")

    def get(self, ell: int, m: int) -> complex:
        return self.coeffs[ell, self.band_limit + m]

    def set(self, ell: int, m: int, value: complex) -> None:
        if abs(m) > ell:
            raise ValueError(f"|m| must be <= ell, got ({ell}, {m})")
        self.coeffs[ell, self.band_limit + m] = value

    def max_symmetry_defect(self) -> float:
        """Largest deviation from a_{l,-m} = (-1)^m conj(a_{l,m})."""
        L = self.band_limit
        defect = 0.0
        for m in range(L + 1):
            sign = -1.0 if m % 2 else 1.0
            diff = self.coeffs[:, L - m] - sign * np.conj(self.coeffs[:, L + m])
            defect = max(defect, float(np.max(np.abs(diff))))
        return defect

    def is_real_field(self, tol: float = _SYMMETRY_TOL) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.coeffs))))
        return self.max_symmetry_defect() <= tol * scale


def zeros_coeffs(band_limit: int) -> SHTCoeffs:
    return SHTCoeffs(band_limit, np.zeros((band_limit + 1, 2 * band_limit + 1), dtype=np.complex128))


def legendre_table(band_limit: int, sin_lat: np.ndarray) -> np.ndarray:
    """Orthonormalized associated Legendre values q_lm(x) for m >= 0.

    Returns an array of shape (L+1, L+1, H) with q[l, m] such that
    Y_lm(lat, lon) = q_lm(sin lat) * exp(i m lon). Uses the standard
    three-term recurrence, stable for the desk-scale degrees used here.
    """
    L = band_limit
    x = np.asarray(sin_lat, dtype=np.float64)
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    q = np.zeros((L + 1, L + 1, x.shape[0]), dtype=np.float64)
    q[0, 0] = 1.0 / np.sqrt(4.0 * np.pi)
    for m in range(1, L + 1):
        q[m, m] = -np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * q[m - 1, m - 1]
    for m in range(L):
        q[m + 1, m] = np.sqrt(2.0 * m + 3.0) * x * q[m, m]
    for m in range(L + 1):
        for ell in range(m + 2, L + 1):
            a = np.sqrt((4.0 * ell**2 - 1.0) / (ell**2 - m**2))
            b = np.sqrt(
                ((2.0 * ell + 1.0) * ((ell - 1.0) ** 2 - m**2))
                / ((2.0 * ell - 3.0) * (ell**2 - m**2))
            )
            q[ell, m] = a * x * q[ell - 1, m] - b * q[ell - 2, m]
    return q


class _TableCache:
    # keyed on (band_limit, id-stable grid latitudes); small, immutable entries
    def __init__(self):
        self._store: dict = {}

    def get(self, band_limit: int, grid: GridSpec) -> np.ndarray:
        key = (band_limit, grid.kind, grid.n_lat, grid.n_lon)
        tab = self._store.get(key)
        if tab is None:
            tab = legendre_table(band_limit, np.sin(grid.latitudes))
            self._store[key] = tab
        return tab


_tables = _TableCache()


def _check_capacity(grid: GridSpec, band_limit: int) -> None:
    if band_limit > grid.capacity:
        raise ValueError(
            f"band limit {band_limit} exceeds grid capacity {grid.capacity} "
            f"({grid.n_lat}x{grid.n_lon} {grid.kind})"
        )


def sht_forward(field: np.ndarray, grid: GridSpec, band_limit: int) -> SHTCoeffs:
    """Analyse an H x W real field into coefficients up to ``band_limit``.

    Longitude integral is a discrete Fourier sum; latitude integral uses the
    grid quadrature weights (exact on gauss-legendre grids for band-limited
    fields).
    """
    _check_capacity(grid, band_limit)
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (grid.n_lat, grid.n_lon):
        raise ValueError(f"field shape {field.shape} != {(grid.n_lat, grid.n_lon)}")
    L = band_limit
    W = grid.n_lon
    tab = _tables.get(L, grid)

    fm = np.fft.fft(field, axis=1)
    weighted = (2.0 * np.pi / W) * grid.quad_weights[:, None] * fm

    out = np.zeros((L + 1, 2 * L + 1), dtype=np.complex128)
    # positive m straight from the FFT bins, negative m from the wrapped bins;
    # bin W - mu and output column L - mu share the ordering mu = L .. 1
    pos = weighted[:, : L + 1]
    out[:, L:] = np.einsum("lmh,hm->lm", tab, pos)
    if L > 0:
        neg = weighted[:, W - L :]
        m_neg = np.arange(L, 0, -1)
        signs = np.where(m_neg % 2 == 1, -1.0, 1.0)
        qneg = tab[:, m_neg, :] * signs[None, :, None]
        out[:, :L] = np.einsum("lmh,hm->lm", qneg, neg)
    return SHTCoeffs(L, out)


def _synthesize(coeffs: SHTCoeffs, grid: GridSpec) -> np.ndarray:
    """Pointwise synthesis, complex output, no symmetry requirement."""
    L = coeffs.band_limit
    _check_capacity(grid, L)
    W = grid.n_lon
    tab = _tables.get(L, grid)

    spectrum = np.zeros((grid.n_lat, W), dtype=np.complex128)
    spectrum[:, : L + 1] = np.einsum("lmh,lm->hm", tab, coeffs.coeffs[:, L:])
    if L > 0:
        m_neg = np.arange(L, 0, -1)
        signs = np.where(m_neg % 2 == 1, -1.0, 1.0)
        qneg = tab[:, m_neg, :] * signs[None, :, None]
        spectrum[:, W - L :] = np.einsum("lmh,lm->hm", qneg, coeffs.coeffs[:, :L])
    return np.fft.ifft(spectrum, axis=1) * W


def sht_inverse(coeffs: SHTCoeffs, grid: GridSpec) -> np.ndarray:
    """Synthesize a real H x W field from conjugate-symmetric coefficients."""
    if not coeffs.is_real_field():
        raise ValueError("coefficients are not conjugate-symmetric; refusing synthesis")
    u = _synthesize(coeffs, grid)
    resid = float(np.max(np.abs(u.imag))) if u.size else 0.0
    scale = max(1.0, float(np.max(np.abs(u.real)))) if u.size else 1.0
    if resid > 1e-10 * scale:
        raise ValueError(f"imaginary residue {resid:.3e} exceeds tolerance")
    return np.ascontiguousarray(u.real)


def sht_forward_adjoint(cobar: np.ndarray, grid: GridSpec, band_limit: int) -> np.ndarray:
    """Adjoint of :func:`sht_forward` for real input fields.

    ``cobar`` holds d(loss)/d(Re a) + i d(loss)/d(Im a) laid out like a
    coefficient array; the return value is d(loss)/d(field).
    """
    g = SHTCoeffs(band_limit, np.asarray(cobar, dtype=np.complex128))
    synth = _synthesize(g, grid)
    return grid.quad_weights[:, None] * (2.0 * np.pi / grid.n_lon) * synth.real


def psd(coeffs: SHTCoeffs) -> np.ndarray:
    """Power spectral density per degree: mean of |a_lm|^2 over the 2l+1 orders."""
    power = np.sum(np.abs(coeffs.coeffs) ** 2, axis=1)
    degrees = np.arange(coeffs.band_limit + 1)
    return power / (2 * degrees + 1)


def coherence(u: SHTCoeffs, v: SHTCoeffs) -> np.ndarray:
    """Normalized real cross-spectrum per degree, 1 at u == v.

    Degrees where either input has zero power are undefined and returned as
    NaN; consumers decide how to treat them.
    """
    if u.band_limit != v.band_limit:
        raise ValueError("band limits differ")
    degrees = np.arange(u.band_limit + 1)
    cross = np.sum((u.coeffs * np.conj(v.coeffs)).real, axis=1) / (2 * degrees + 1)
    pu, pv = psd(u), psd(v)
    denom = np.sqrt(pu * pv)
    out = np.full(u.band_limit + 1, np.nan)
    ok = (pu > 0.0) & (pv > 0.0)
    out[ok] = cross[ok] / denom[ok]
    return out


def coeffs_to_csv(coeffs: SHTCoeffs, path) -> None:
    """Debug dump, one row per (l, m) with real and imaginary parts."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ell", "m", "re", "im"])
        L = coeffs.band_limit
        for ell in range(L + 1):
            for m in range(-ell, ell + 1):
                c = coeffs.coeffs[ell, L + m]
                writer.writerow([ell, m, repr(c.real), repr(c.imag)])
