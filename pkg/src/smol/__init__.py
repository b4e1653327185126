"""Simulation, filtering and pose recovery for magneto-oscillatory localization."""

__version__ = "0.1.0"
