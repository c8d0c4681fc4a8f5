"""Dual-GCN encoder, transformer captioner and cross-review curriculum training."""

__version__ = "0.1.0"
