"""Image-to-point-cloud registration machinery with oracle features."""

__version__ = "0.1.0"
