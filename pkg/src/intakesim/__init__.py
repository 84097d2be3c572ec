"""Simulated patient-interview environment and timing controllers."""

__version__ = "0.1.0"
