"""Desk-scale latent speech-text transformer."""

__version__ = "0.1.0"
