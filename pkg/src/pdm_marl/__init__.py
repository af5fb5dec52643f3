"""Probabilistic RUL prediction and two-agent PPO for replacement/inspection scheduling."""

__version__ = "0.1.0"
