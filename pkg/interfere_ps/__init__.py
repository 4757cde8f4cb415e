"""Propensity scores for clustered studies with partial interference."""

__version__ = "0.1.0"
