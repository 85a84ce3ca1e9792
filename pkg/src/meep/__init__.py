"""Selective entropy maximisation on misclassified pixels, with baselines, calibration metrics and a synthetic task."""

__version__ = "0.1.0"
