"""Introspective driving explanations by fusing decision and perception features."""

__version__ = "0.1.0"
