"""Offline robust Q-learning for ad-load decisions, with uplift evaluation tools."""

__version__ = "0.1.0"
