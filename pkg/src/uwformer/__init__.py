"""Wavelet-domain transformer for underwater image enhancement."""

__version__ = "0.1.0"
