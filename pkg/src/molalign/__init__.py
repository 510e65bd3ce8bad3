"""Multi-view molecule-text alignment with a multi-querying transformer."""

__version__ = "0.1.0"
