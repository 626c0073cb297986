"""Robust landmark patch matching with neural ODE vertex diffusion and graph PDE neighbourhood diffusion."""

__version__ = "0.1.0"
