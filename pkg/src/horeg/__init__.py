"""Rigid hand-object registration, silhouette reconstruction and benchmark metrics."""

__version__ = "0.1.0"
