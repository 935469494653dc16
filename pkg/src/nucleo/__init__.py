"""Compositional nuclei detection and weakly-supervised segmentation."""

__version__ = "0.1.0"
