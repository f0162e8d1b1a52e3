"""Layer-selective feature losses for 2D super-resolution of diffusion MRI."""

__version__ = "0.1.0"
