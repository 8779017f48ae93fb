"""Forward surrogate for metasurface radar absorbing structures."""

__version__ = "0.1.0"
