"""Desk-scale bi-encoder entity linking."""

__version__ = "0.1.0"
