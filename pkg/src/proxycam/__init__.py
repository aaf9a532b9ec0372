"""Perturbed-lens simulation and proxy-camera construction."""
__version__ = "0.1.0"
