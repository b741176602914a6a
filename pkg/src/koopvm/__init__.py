"""Stagewise quality estimation for multistage manufacturing with deep Koopman models."""

__version__ = "0.1.0"
