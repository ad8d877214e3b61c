"""Fault monitoring for passive optical networks from simulated OTDR traces."""

__version__ = "0.1.0"
