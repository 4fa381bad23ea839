"""Training-free spatial control toolkit for a toy pixel-space diffusion model."""

__version__ = "0.1.0"
