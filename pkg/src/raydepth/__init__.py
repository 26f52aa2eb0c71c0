"""Metric monocular depth from camera-ray embeddings and a variational latent, at desk scale."""

__version__ = "0.1.0"
