"""Directed spanning forests on perturbed lattices."""

__version__ = "0.1.0"
