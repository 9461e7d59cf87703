"""Diestel-Leader graphs, Sol geometry and a coarse-differentiation pipeline for quasi-isometries."""

__version__ = "0.1.0"
