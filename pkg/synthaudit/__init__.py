"""Synthetic clinical report generation and corpus auditing."""

__version__ = "0.1.0"
