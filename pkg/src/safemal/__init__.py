"""Probabilistically-safe meta-active learning."""

__version__ = "0.1.0"
