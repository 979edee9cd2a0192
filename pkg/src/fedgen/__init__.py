"""Federated low-rank adaptation of a frozen generative backbone, at desk scale."""

__version__ = "0.1.0"
