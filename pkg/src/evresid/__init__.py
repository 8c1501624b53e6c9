"""Residual high-temporal-resolution optical flow for event cameras."""
__version__ = "0.1.0"
