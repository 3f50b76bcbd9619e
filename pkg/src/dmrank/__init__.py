"""Directional multi-aspect ranking with personalised covariances."""

__version__ = "0.1.0"
