"""Dual-stage transformer-encoder fault classification on synthetic PMU phasor data."""

__version__ = "0.1.0"
