"""Adversarial-sample detection from MC-dropout uncertainty and feature-space closeness."""

__version__ = "1.0.0"
