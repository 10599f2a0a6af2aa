"""Octree-based operator surrogate for time-resolved vessel flow on synthetic trees."""

__version__ = "0.1.0"
