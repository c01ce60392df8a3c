"""Group-wise contrastive learning of density-invariant point features for distant LiDAR registration."""

__version__ = "0.1.0"
