"""Compositional registration maps for parametric problems on curved domains."""

from .errors import RegmapError

__version__ = "0.1.0"

__all__ = ["RegmapError", "__version__"]
