"""Cooperative multi-agent Q-learning with divided, prioritised experience replay."""

__version__ = "0.1.0"
