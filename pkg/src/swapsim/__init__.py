"""Swap-based memory optimization for dynamic operator sequences, simulated."""

__version__ = "0.1.0"
