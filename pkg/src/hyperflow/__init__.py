"""Ensemble-averaged, reservoir-corrected discharge prediction for gauged and ungauged basins."""

__version__ = "0.1.0"
