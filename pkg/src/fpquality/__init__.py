"""Utility-guided fingerphoto quality assessment."""

__version__ = "0.1.0"
