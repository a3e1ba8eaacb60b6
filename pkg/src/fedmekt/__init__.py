"""Simulator for multimodal federated learning with embedding knowledge transfer."""

__version__ = "0.1.0"
