"""Federated data provenance simulator: watermarked client data, toy LM, robust aggregation."""

__version__ = "0.1.0"
