"""Malicious domain detection with hierarchical multiple-instance networks over relation graphs."""

__version__ = "0.1.0"
