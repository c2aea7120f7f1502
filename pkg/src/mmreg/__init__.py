"""Depth/video misalignment detection via patch-vote CNN classification."""

__version__ = "0.1.0"
