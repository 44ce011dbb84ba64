"""Superpatch masked autoencoder for 3D volumes, with evaluation harnesses."""

__version__ = "0.1.0"
