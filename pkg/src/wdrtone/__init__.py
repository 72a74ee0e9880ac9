"""Tone mapping of wide-dynamic-range luminance with a two-band Laplacian CNN."""

__version__ = "0.1.0"
