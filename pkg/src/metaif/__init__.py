"""Influence functions for proximal bilevel meta-learning."""

__version__ = "0.1.0"
