"""Desk-scale laboratory for precise FFN key-value model editing."""

__version__ = "0.1.0"
