"""Score-based diffusion downscaling with sliced-Wasserstein distance regularization."""

__version__ = "0.1.0"
