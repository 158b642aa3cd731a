"""Optimal feedback synthesis for infinite-horizon mean-field LQ control."""
__version__ = "0.1.0"
