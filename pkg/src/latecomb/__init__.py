"""LATE estimation from separately observed datasets under a two-regime design."""

__version__ = "0.1.0"
