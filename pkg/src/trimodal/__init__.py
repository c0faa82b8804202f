"""Desk-scale visual-audio-text masked unit prediction."""

__version__ = "0.1.0"
