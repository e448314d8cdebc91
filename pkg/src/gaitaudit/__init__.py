"""Attention-based multi-sensor gait classifier with a sensor-importance audit."""

__version__ = "0.1.0"
