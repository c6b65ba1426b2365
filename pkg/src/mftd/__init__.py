"""Data-driven multifidelity topology design with a multi-channel VAE."""

__version__ = "0.1.0"
