"""Privacy leakage lab for split transformer inference."""

__version__ = "0.1.0"
