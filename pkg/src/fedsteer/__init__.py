"""Federated imitation learning for steering policies."""

__version__ = "0.1.0"
