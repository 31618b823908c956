"""Byte-level and embeddingless transformer translation, in numpy."""

__version__ = "0.1.0"
