"""Weighted margin-rank batch learning to rank for implicit feedback."""

__version__ = "0.1.0"
