"""Lightweight patch-independent MLP foundation model for wireless IQ / CIR time series."""
__version__ = "0.1.0"

from .kernels import BACKEND
