"""Unsupervised two-stage semantic parsing on a synthetic executable domain."""

__version__ = "0.1.0"
