"""Two-script sentiment classifier fused by cross-attention and aligned with exact EMD."""

__version__ = "0.1.0"
