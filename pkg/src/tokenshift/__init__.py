"""Token-level distribution shift analysis between two next-token policies."""

__version__ = "0.1.0"
