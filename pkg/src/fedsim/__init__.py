"""Deterministic federated-learning simulator for nested-region segmentation."""

__version__ = "0.1.0"
