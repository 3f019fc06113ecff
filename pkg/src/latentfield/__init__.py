"""Latent-space radiance fields with mask-constrained diffusion editing."""

__version__ = "0.1.0"
