"""Desk-scale semi-supervised open-world object detection."""

__version__ = "0.1.0"
