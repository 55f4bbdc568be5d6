"""Camera image-formation simulator and detection-evaluation toolkit."""

__version__ = "0.1.0"
