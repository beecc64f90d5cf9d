"""Fitness-landscape analysis for LLM-assisted algorithm search."""

__version__ = "0.1.0"
