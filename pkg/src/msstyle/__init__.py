"""Multi-scale speaking-style modelling for expressive text-to-speech."""

__version__ = "0.1.0"
