"""Hybrid iterative linear-quadratic estimation and a salted Kalman filter baseline."""

__version__ = "0.1.0"
