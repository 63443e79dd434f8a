"""Closed-form positioning from pseudoranges of two unsynchronised systems."""

__all__ = [
    "config",
    "models",
    "geometry",
    "linear_stage",
    "polynomial",
    "solver",
    "iterative",
    "analysis",
    "simulation",
    "ingestion",
    "reporting",
    "cache",
]
