"""Multi-planar 2D U-Net segmentation pipeline."""

__version__ = "0.1.0"
