"""Desk-scale 4D occupancy field pre-training pipeline."""

__version__ = "0.1.0"
