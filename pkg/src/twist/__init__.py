"""Twist: a quantum language with purity types, static purity analysis and runtime separability checks."""

__version__ = "0.1.0"
