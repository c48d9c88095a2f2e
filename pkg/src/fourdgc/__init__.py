"""Rate-distortion optimised codec for streamable dynamic 3D Gaussian scenes."""

__version__ = "0.1.0"
