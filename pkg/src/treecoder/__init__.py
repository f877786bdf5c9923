"""Hierarchical multi-agent code generation for image-processing projects."""

__version__ = "0.1.0"
