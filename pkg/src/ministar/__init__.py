"""Desk-scale league training for a tiny real-time strategy game."""

__version__ = "0.1.0"
