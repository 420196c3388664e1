"""Particle solver and verifier for first-order mean field games."""

__version__ = "0.1.0"
