"""Hierarchical polymorphic multitask segmentation of chest CT at desk scale."""

__version__ = "1.0.0"
