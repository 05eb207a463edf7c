"""MnasFPN Search - latency-aware architecture search for detection heads."""

__version__ = "1.0.0"
__author__ = "MnasFPN Search Team"
__description__ = "Latency-aware search over mobile feature-pyramid detection heads"
