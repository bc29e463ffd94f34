"""Differentiable distribution-grid and EV-fleet simulation with physics-informed TD3."""
__version__ = "0.1.0"
