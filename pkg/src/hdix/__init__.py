"""Two-stage retrieval of document images: fractal-dimension filtering
followed by SIFT keypoint ranking."""

__version__ = "0.1.0"

INDEX_FORMAT_VERSION = 1
