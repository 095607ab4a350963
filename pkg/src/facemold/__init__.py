"""Coarse-to-fine face reconstruction by inverse rendering."""

__version__ = "0.1.0"
