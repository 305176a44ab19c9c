"""Expression-aware facial video inpainting with gated temporal-shift convolutions."""

__version__ = "0.1.0"
