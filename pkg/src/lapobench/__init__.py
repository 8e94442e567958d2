"""Latent action policy learning on synthetic environments with known ground truth."""

__version__ = "0.1.0"
