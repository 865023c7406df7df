"""Text-to-image person retrieval with a dual-path residual network."""

__version__ = "0.1.0"
