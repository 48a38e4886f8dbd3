"""Global latitude-longitude grids with quadrature and area weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GAUSS = "gauss-legendre"
EQUIANGULAR = "equiangular"

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class GridSpec:
    """A spherical grid, rows ordered north to south.

    ``quad_weights`` integrate f(x) dx for x = sin(latitude) and sum to 2;
    ``area_weights`` are proportional to cos(latitude) and normalized so
    their grid mean is 1.
    """

    n_lat: int
    n_lon: int
    kind: str
    latitudes: np.ndarray
    longitudes: np.ndarray
    quad_weights: np.ndarray
    area_weights: np.ndarray

    @property
    def capacity(self) -> int:
        """Largest spherical harmonic degree resolvable on this grid."""
        return min(self.n_lat - 1, self.n_lon // 2 - 1)

    def to_dict(self) -> dict:
        return {"n_lat": self.n_lat, "n_lon": self.n_lon, "kind": self.kind}


def _fejer1_weights(n: int) -> np.ndarray:
    # First Fejer rule on midpoint colatitudes: positive, exact to degree n-1.
    theta = (np.arange(n) + 0.5) * np.pi / n
    k = np.arange(1, n // 2 + 1)
    corr = 2.0 * np.sum(np.cos(2.0 * np.outer(theta, k)) / (4.0 * k**2 - 1.0), axis=1)
    return (2.0 / n) * (1.0 - corr)


def make_grid(n_lat: int, n_lon: int, kind: str = GAUSS) -> GridSpec:
    """Build a grid of the given kind.

    ``gauss-legendre`` places rows at Gauss-Legendre nodes, so quadrature of
    band-limited products up to the grid capacity is exact. ``equiangular``
    spaces rows uniformly in latitude (band midpoints, no pole rows) with
    Clenshaw-Curtis-type weights; its quadrature is approximate for high
    degrees.
    """
    if n_lat < 2:
        raise ValueError(f"n_lat must be >= 2, got {n_lat}")
    if n_lon < 4 or n_lon % 2 != 0:
        raise ValueError(f"n_lon must be even and >= 4, got {n_lon}")

    if kind == GAUSS:
        x, w = np.polynomial.legendre.leggauss(n_lat)
        order = np.argsort(-x)  # north first
        x, w = x[order], w[order]
        lats = np.arcsin(x)
    elif kind == EQUIANGULAR:
        theta = (np.arange(n_lat) + 0.5) * np.pi / n_lat
        lats = np.pi / 2.0 - theta
        w = _fejer1_weights(n_lat)
    else:
        raise ValueError(f"unknown grid kind {kind!r}")

    lons = 2.0 * np.pi * np.arange(n_lon) / n_lon
    cos_lat = np.cos(lats)
    area = cos_lat * (n_lat / np.sum(cos_lat))

    assert abs(np.sum(w) - 2.0) < _WEIGHT_TOL
    assert np.all(w > 0.0)
    assert abs(np.mean(area) - 1.0) < _WEIGHT_TOL

    return GridSpec(
        n_lat=n_lat,
        n_lon=n_lon,
        kind=kind,
        latitudes=lats,
        longitudes=lons,
        quad_weights=w,
        area_weights=area,
    )
