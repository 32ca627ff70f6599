"""Desk-scale multimodal transformer for visual relationship prediction."""

__version__ = "0.1.0"
