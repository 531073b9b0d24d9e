"""Illumination-robust person re-identification with a two-stream disentangling network."""

__version__ = "0.1.0"
