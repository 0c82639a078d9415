"""Evaluation and verification-guided optimization of tool documentation."""

__version__ = "0.1.0"
