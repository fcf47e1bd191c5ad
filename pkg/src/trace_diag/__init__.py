"""Diagnostics for VLM-to-DiT connectors on relation-editing benchmarks."""

__version__ = "0.1.0"
