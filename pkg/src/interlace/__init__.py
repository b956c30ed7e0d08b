"""Weakly supervised point cloud segmentation via interlaced 2D-3D attention."""

__version__ = "0.1.0"
