"""Desk-scale laboratory for scaling-law studies of windowed-attention emulators."""

from .grid import EQUIANGULAR, GAUSS, GridSpec, make_grid

__all__ = [
    "EQUIANGULAR",
    "GAUSS",
    "GridSpec",
    "make_grid",
]
