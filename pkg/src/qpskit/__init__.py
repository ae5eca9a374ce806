"""Correlated multi-sensor electrometry: simulate, detect, localize, decompose."""

__version__ = "0.1.0"
