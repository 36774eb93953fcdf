"""Heterogeneous multi-source transfer Gaussian processes with learned input alignment."""

__version__ = "0.1.0"
