"""Regrasp planning for pick-and-place under segmentation and completion uncertainty."""

__version__ = "0.1.0"
