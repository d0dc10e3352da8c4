"""Simulation and learning toolkit for depth-guided navigation of a
follow-the-leader endoscope through tubular lumens."""

__version__ = "0.1.0"
