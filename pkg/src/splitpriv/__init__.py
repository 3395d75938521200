"""Deterministic simulator and optimizer for personalized, noise-protected split learning."""

__version__ = "0.1.0"
