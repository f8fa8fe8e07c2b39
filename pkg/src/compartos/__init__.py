"""Linkage-based compartmentalization on an emulated tagged-capability machine."""

__version__ = "0.1.0"
