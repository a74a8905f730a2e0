"""SAEViT building blocks, baselines and a desk-scale verification harness."""

__version__ = "0.1.0"
