"""Tail asymptotics of sums of randomly weighted, interdependent heavy-tailed losses."""

__version__ = "0.1.0"
