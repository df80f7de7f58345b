"""Radar point-cloud enhancement as a Bayesian inverse problem with a diffusion prior."""

__version__ = "0.1.0"
