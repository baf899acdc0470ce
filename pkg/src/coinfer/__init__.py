"""Edge-cloud co-inference for semantic segmentation with a learned hard-input gate."""

__version__ = "0.1.0"
