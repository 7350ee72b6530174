"""Clustered federated learning simulator with adaptive cluster count."""

__version__ = "0.1.0"
