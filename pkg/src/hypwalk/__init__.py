"""Random walks on hyperbolic spaces induced by free-group representations."""

__version__ = "0.1.0"
