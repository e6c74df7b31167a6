"""Cascading conditional generation of multi-scale map-tile pyramids."""

__version__ = "0.1.0"
