"""Few-shot hyperspectral target detection with test-time adaptation."""

__version__ = "0.1.0"
