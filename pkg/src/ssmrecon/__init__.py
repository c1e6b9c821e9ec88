"""Selective state-space MRI reconstruction with hard k-space data consistency."""

__version__ = "0.1.0"
