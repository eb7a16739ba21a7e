"""Unsupervised depth completion with calibrated backprojection layers."""

__version__ = "0.1.0"
