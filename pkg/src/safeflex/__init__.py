"""Voltage-safe multi-agent flexibility dispatch on radial distribution feeders."""

__version__ = "0.1.0"
