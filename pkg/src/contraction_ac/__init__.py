"""Contraction-metric-shaped actor-critic for trajectory tracking of control-affine systems."""

__version__ = "0.1.0"
