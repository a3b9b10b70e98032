"""Automated Encouragement and Warmth scoring from classroom recordings."""

__version__ = "0.1.0"
