"""Signaling-game experiments with a differentiable-stack receiver."""

__version__ = "0.1.0"
