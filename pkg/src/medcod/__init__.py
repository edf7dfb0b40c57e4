"""Desk-scale workbench for knowledge-augmented medical machine translation."""

__version__ = "0.1.0"
