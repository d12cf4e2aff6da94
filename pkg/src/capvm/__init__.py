"""Capability-isolated compartments (cVMs) on a simulated capability machine."""

__version__ = "0.1.0"
