"""MoLRG Lab - diffusion models on mixtures of low-rank Gaussians at desk scale."""

__version__ = "1.0.0"
