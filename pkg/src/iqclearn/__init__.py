"""Learn integral quadratic constraints for plant-model mismatch from trajectory data."""

__version__ = "0.1.0"
