"""nerfprobe: desk-scale 3D semantic segmentation of radiance fields from 2D maps."""

__version__ = "0.1.0"
