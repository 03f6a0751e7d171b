"""Non-autoregressive coarse-to-fine caption generation."""

__version__ = "0.1.0"
