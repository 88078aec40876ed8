"""Data-driven estimation of indirect rate-distortion curves."""

__version__ = "0.1.0"
