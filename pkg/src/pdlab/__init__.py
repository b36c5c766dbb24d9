"""Spectral laboratory for partially dissipative hyperbolic systems with
time-dependent coefficients."""

__version__ = "0.1.0"
