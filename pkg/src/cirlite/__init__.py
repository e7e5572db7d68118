"""Desk-scale composed image retrieval with a self-contained autodiff core."""

__version__ = "0.1.0"
