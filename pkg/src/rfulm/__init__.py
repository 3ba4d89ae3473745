"""Microbubble localisation directly on plane-wave channel data."""

__version__ = "0.1.0"
