"""Weakly supervised segmentation and recognition of human activity streams."""

__version__ = "0.1.0"
