"""Numerical laboratory for self-similar blowup in Keller-Segel coupled to Navier-Stokes."""

from . import dynamics, grids, linop, profile, spectral

__all__ = ["dynamics", "grids", "linop", "profile", "spectral"]
