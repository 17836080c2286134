"""Symbolic regression of closed-form expressions over multi-band rasters."""
__version__ = "0.1.0"
