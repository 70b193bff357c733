"""Text-conditioned adapters for a promptable segmentation micro-model."""

__version__ = "0.1.0"
