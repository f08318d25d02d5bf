"""Relational language-image pre-training on synthetic relational scenes."""

__version__ = "0.1.0"
