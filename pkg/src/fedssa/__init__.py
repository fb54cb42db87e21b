"""Desk-scale simulator for class-wise header aggregation in model-heterogeneous federated learning."""

__version__ = "0.1.0"
