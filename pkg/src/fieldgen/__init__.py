"""Boundary-conditioned latent diffusion for electromagnetic field generation."""

__version__ = "0.1.0"
