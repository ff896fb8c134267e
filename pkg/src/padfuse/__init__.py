"""Visuo-tactile 6-DoF object pose tracking."""

__version__ = "0.1.0"
