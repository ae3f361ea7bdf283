"""Desk-scale incremental semantic segmentation lab."""

__version__ = "0.1.0"
