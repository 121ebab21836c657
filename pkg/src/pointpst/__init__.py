"""Synthetic point-cloud classification with attacks, purifiers and test-time self-training."""

__version__ = "0.1.0"
