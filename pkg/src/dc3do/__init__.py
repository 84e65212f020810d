"""Zero-shot 3D shape classification with class-conditional latent diffusion."""

__version__ = "0.1.0"
