"""Heatmap-weighted sparse matching with a corruption-robustness pose benchmark."""

__version__ = "0.1.0"
