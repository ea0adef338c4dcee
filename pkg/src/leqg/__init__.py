"""Risk-sensitive LEQG control with exploratory controls, solved as an LQG game."""

__version__ = "0.1.0"
