"""Aerocapture guidance with a learned probabilistic mode indicator."""

__version__ = "0.1.0"
