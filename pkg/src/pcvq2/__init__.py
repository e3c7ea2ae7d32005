"""Hierarchical VQ-VAE with gated PixelCNN priors and phased data augmentation."""

__version__ = "0.1.0"
