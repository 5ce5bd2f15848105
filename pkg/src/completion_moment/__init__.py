"""Completion-moment detection from per-frame feature sequences."""

__version__ = "0.1.0"
