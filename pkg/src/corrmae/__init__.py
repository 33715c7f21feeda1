"""Masked-correspondence pre-training and correspondence pruning on synthetic two-view scenes."""

__version__ = "0.1.0"
