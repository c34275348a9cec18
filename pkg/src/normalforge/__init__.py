"""Point-cloud normal estimation and refinement."""

__version__ = "0.1.0"
