"""Video object segmentation with meta-learned visual-word dictionaries."""

__version__ = "0.1.0"
