"""Supervised-unsupervised learned CT reconstruction at desk scale."""

__version__ = "0.1.0"
