"""Simulator for Byzantine machine identification and rescaled decentralized SGD."""

__version__ = "0.1.0"
