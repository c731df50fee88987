"""Variational continual test-time adaptation for small feed-forward classifiers."""

__version__ = "0.1.0"
