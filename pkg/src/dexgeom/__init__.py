"""Geometry and optimization toolkit for turning reconstructed hand-object videos
into dexterous robot demonstrations."""

__version__ = "0.1.0"
