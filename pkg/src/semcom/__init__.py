"""Learned semantic image transmission with a residual latent denoiser."""
__version__ = "0.1.0"
