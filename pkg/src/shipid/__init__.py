"""Data-driven ship maneuvering models identified from free-running trajectories."""

__version__ = "0.1.0"
