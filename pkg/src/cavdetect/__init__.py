"""Delay-aware extended Kalman filtering and chi-square anomaly detection for car following."""

__version__ = "0.1.0"
