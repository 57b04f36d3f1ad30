"""Text-based person search on synthetic full-scene benchmarks."""

__version__ = "0.1.0"
