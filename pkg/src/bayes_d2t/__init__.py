"""Bayesian detect-to-track: multi-object particle filtering and VSMC learning."""

__version__ = "0.1.0"
