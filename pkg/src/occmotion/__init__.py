"""Occluded human-motion recovery: detection, completion, fusion and IK refinement."""

__version__ = "0.1.0"
