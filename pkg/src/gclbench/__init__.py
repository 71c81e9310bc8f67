"""Modular graph contrastive learning: augmentations, encoders, contrasting modes, objectives, miners."""

__version__ = "0.1.0"
