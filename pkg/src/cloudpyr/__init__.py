"""Deep pyramid network engine for pixel-level cloud segmentation."""

__version__ = "0.1.0"
