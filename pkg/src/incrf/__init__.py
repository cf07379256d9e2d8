"""Incremental tri-plane radiance fields with feature-metric pose alignment."""

__version__ = "0.1.0"
