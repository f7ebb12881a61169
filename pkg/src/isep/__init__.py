"""Offline RL with interpolated expectile values and Bernoulli-gated policy updates."""

__version__ = "0.1.0"
