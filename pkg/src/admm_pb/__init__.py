"""Constrained performance boosting of pre-stabilized systems via ADMM."""

__version__ = "0.1.0"
