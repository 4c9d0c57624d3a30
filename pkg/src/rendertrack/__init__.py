"""Segmentation refinement by tracking a deformable textured mesh."""

__version__ = "0.1.0"
