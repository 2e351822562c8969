"""Confidence-weighted bit allocation for light-field pseudo-sequence coding."""

__version__ = "0.1.0"
