"""Toolkit for building, hardening, and scoring token-level hallucination
localization benchmarks over long image captions."""

__version__ = "0.1.0"
