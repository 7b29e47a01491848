"""Desk-scale digital twin for multi-pedestrian intersection safety warnings."""

__version__ = "0.1.0"
