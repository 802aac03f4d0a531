"""Neighbor-enhanced ranking for long-tail users and items."""

__version__ = "0.1.0"
