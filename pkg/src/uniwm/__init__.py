"""Desk-scale unified navigation world model with hierarchical KV memory."""

__version__ = "0.1.0"
