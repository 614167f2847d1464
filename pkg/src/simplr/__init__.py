"""Scale-aware sparse attention and a miniature plain single-scale detector."""

__version__ = "0.1.0"
