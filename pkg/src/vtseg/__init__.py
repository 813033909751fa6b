"""Speech-guided multimodal segmentation of vocal-tract articulators."""

__version__ = "0.1.0"
