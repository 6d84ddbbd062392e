"""Stateful and non-stateful spiking networks with spatial-temporal separable blocks."""

__version__ = "0.1.0"
