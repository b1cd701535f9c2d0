"""Malware detection from quantitative data flow graph metrics."""

__version__ = "0.1.0"
