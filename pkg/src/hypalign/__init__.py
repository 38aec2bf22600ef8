"""Optimal-transport alignment of point clouds on Poincaré balls."""

__version__ = "0.1.0"
