"""Monocular VO scale recovery and drift reduction with a single ranging anchor."""

__version__ = "0.1.0"
