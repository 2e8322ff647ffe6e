"""Desk-scale laboratory for gender bias in multilingual transformer translation."""

__version__ = "0.1.0"
