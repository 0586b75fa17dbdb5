"""Inpainting-based face swapping with a latent diffusion denoiser, plus a toy face world to train and test it on."""

__version__ = "0.1.0"
