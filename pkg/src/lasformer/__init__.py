"""Lightweight attention selection for encoder-decoder transformers."""
__version__ = "0.1.0"
