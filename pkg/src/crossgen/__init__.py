"""Audio-to-image generation with cross-modal VAEs and VAE-GANs."""

__version__ = "0.1.0"
