"""Grasp planning with proposal networks, shape reconstruction and nearest-point refinement."""

__version__ = "0.1.0"
