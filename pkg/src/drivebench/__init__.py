"""Seeded 2D closed-loop driving benchmark."""

__version__ = "0.1.0"
