"""Polarimetric inverse rendering with neural incident Stokes fields."""

__version__ = "0.1.0"
