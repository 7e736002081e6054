"""Closed-loop digital-twin attack detection and resilient control on a simulated hydraulic plant."""

__version__ = "0.1.0"
