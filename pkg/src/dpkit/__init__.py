"""Differentially private ML toolkit."""
__version__ = "0.1.0"
