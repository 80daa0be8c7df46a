"""Flow matching with diffusion-guided and learned couplings on 2-D toy data."""

__version__ = "0.1.0"
