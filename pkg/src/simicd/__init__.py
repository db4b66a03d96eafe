"""Closed-loop ICD / cardiac tissue co-simulation."""
__version__ = "0.1.0"
