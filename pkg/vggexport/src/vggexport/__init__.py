"""VGG-19 weight exporter and golden-activation fixture emitter."""

__version__ = "0.1.0"
