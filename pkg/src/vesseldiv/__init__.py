"""Centerline reconstruction of vessel trees with a divergence prior on oriented tangents."""

__version__ = "0.1.0"
