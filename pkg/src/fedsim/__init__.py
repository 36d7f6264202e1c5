"""Federated learning simulator with BN-statistics based personalized aggregation."""

__version__ = "0.1.0"
