"""Volumetric CNN toolkit for CT-based HPV status classification."""

__version__ = "0.1.0"
