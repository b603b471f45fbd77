"""Receding-horizon energy management for radial microgrids."""

__version__ = "0.1.0"
