"""Dynamic sky-illumination sequences from a single fisheye sky image."""

__version__ = "0.1.0"
