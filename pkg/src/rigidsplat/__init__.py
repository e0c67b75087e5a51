"""Two-view dynamic scene reconstruction with rigid-motion Gaussian splatting."""

__version__ = "0.1.0"
