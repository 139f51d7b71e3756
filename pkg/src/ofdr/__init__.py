"""Coherent OFDR for repeatered submarine cables: probe, channel, receiver and analysis."""

__version__ = "0.1.0"
