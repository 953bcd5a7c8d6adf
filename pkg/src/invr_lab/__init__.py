"""Inverse retrieval for long-tail recommendation, with a simulator to test it in."""

__version__ = "0.1.0"
