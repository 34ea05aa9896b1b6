"""Few-shot semantic segmentation with self-supervised prototypes on a synthetic shapes corpus."""

__version__ = "0.1.0"
