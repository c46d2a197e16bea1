"""Hybrid FE/FD time-domain Maxwell solver and adaptive coefficient inversion."""

__version__ = "0.1.0"
