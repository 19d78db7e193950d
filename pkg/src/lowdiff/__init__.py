"""Differential checkpointing by reusing compressed gradients."""
__version__ = "0.1.0"
