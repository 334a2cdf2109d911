"""Conformally flat approximation of length metrics on a box."""

__version__ = "0.1.0"
