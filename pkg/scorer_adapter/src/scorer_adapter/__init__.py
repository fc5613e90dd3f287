"""Line-delimited JSON scorer protocol server for transformer code classifiers."""

from .adapter import AdapterConfig, StubModel, serve

__all__ = ["AdapterConfig", "StubModel", "serve"]
