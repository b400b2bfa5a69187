"""Ingestion bridge: public hyperspectral dataset formats in,
specdetect's native scene and prior files out."""

__version__ = "0.1.0"
